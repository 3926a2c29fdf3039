//! Posterior snapshot export and import.
//!
//! The snapshot is a line-oriented text file: a short header followed by one
//! record per entity carrying the mean, the covariance (lower triangle — the
//! filter keeps it exactly symmetric), the reference mean, the reference
//! cross-covariance (full, since it is not symmetric), and the reference
//! covariance (lower triangle). Floats are written in Rust's shortest
//! round-trip decimal form, so export → import → export reproduces the file
//! byte for byte and the posteriors bit for bit.
//!
//! A snapshot carries posterior state only. Importing requires a filter
//! already configured with the matching model and dynamics; records are
//! validated against the model's entity dimensions.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{DekfError, Result};
use crate::filter::{DecoupledFilter, EntityPosterior};
use crate::signal::EntityId;

const MAGIC: &str = "dekf-snapshot v1";

fn bad(msg: impl Into<String>) -> DekfError {
    DekfError::IoError(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

/// Renders the filter's entity posteriors as a snapshot string. Entities are
/// ordered by id so equal states produce identical bytes.
pub fn to_string(filter: &DecoupledFilter) -> Result<String> {
    let mut ids: Vec<&EntityId> = filter.entity_ids().collect();
    ids.sort();

    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "entities {}", ids.len());
    for id in ids {
        if id.namespace.contains(char::is_whitespace) || id.namespace.is_empty() {
            return Err(DekfError::ConfigError(format!(
                "namespace {:?} cannot be snapshotted: must be non-empty without whitespace",
                id.namespace
            )));
        }
        let post = filter.posterior(id).expect("listed id exists");
        let k = post.mean.len();
        let _ = writeln!(out);
        let _ = writeln!(out, "entity {} {}", id.namespace, id.index);
        let _ = writeln!(out, "dim {k}");
        let _ = writeln!(out, "last_t {}", post.last_t);
        write_floats(&mut out, "mean", post.mean.iter().copied());
        write_floats(&mut out, "cov_lower", lower_triangle(&post.cov));
        write_floats(&mut out, "ref_mean", post.ref_mean.iter().copied());
        write_floats(&mut out, "ref_cross", row_major(&post.ref_cross));
        write_floats(&mut out, "ref_cov_lower", lower_triangle(&post.ref_cov));
    }
    Ok(out)
}

/// Parses a snapshot and installs its posteriors into `filter`, which must be
/// configured with the model the snapshot was taken under. Existing entries
/// for the same entities are replaced; others are left alone.
pub fn from_str(filter: &mut DecoupledFilter, text: &str) -> Result<()> {
    let mut lines = text.lines().enumerate();
    let header = next_content_line(&mut lines).ok_or_else(|| bad("empty snapshot"))?;
    if header.1 != MAGIC {
        return Err(bad(format!(
            "line {}: expected header {MAGIC:?}, found {:?}",
            header.0 + 1,
            header.1
        )));
    }
    let count_line = next_content_line(&mut lines).ok_or_else(|| bad("missing entity count"))?;
    let declared: usize = parse_field(count_line, "entities")?;

    // Parse records into a staging area first so a malformed file cannot
    // leave the filter half-imported.
    let mut staged: Vec<(EntityId, EntityPosterior)> = Vec::with_capacity(declared);
    while let Some((lineno, line)) = next_content_line(&mut lines) {
        let mut parts = line.split_ascii_whitespace();
        if parts.next() != Some("entity") {
            return Err(bad(format!("line {}: expected an entity record", lineno + 1)));
        }
        let namespace = parts
            .next()
            .ok_or_else(|| bad(format!("line {}: entity missing namespace", lineno + 1)))?;
        let index: u64 = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(format!("line {}: entity missing index", lineno + 1)))?;
        if parts.next().is_some() {
            return Err(bad(format!("line {}: trailing fields on entity line", lineno + 1)));
        }
        let id = EntityId::new(namespace, index);

        let k: usize = parse_field(
            next_content_line(&mut lines).ok_or_else(|| bad(format!("{id}: missing dim")))?,
            "dim",
        )?;
        let last_t: u64 = parse_field(
            next_content_line(&mut lines).ok_or_else(|| bad(format!("{id}: missing last_t")))?,
            "last_t",
        )?;
        let mean = read_vector(&mut lines, "mean", k)?;
        let cov = read_lower_triangle(&mut lines, "cov_lower", k)?;
        let ref_mean = read_vector(&mut lines, "ref_mean", k)?;
        let ref_cross = read_full_matrix(&mut lines, "ref_cross", k)?;
        let ref_cov = read_lower_triangle(&mut lines, "ref_cov_lower", k)?;
        staged.push((
            id,
            EntityPosterior {
                mean,
                cov,
                ref_mean,
                ref_cross,
                ref_cov,
                last_t,
            },
        ));
    }
    if staged.len() != declared {
        return Err(bad(format!(
            "header declares {declared} entities, file contains {}",
            staged.len()
        )));
    }
    for (id, post) in staged {
        filter.insert_posterior(id, post)?;
    }
    Ok(())
}

/// Writes a snapshot file, creating parent directories as needed.
pub fn export_to_path(filter: &DecoupledFilter, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, to_string(filter)?)?;
    Ok(())
}

/// Reads a snapshot file into the filter.
pub fn import_from_path(filter: &mut DecoupledFilter, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path)?;
    from_str(filter, &text)
}

fn write_floats(out: &mut String, label: &str, values: impl Iterator<Item = f64>) {
    out.push_str(label);
    for v in values {
        let _ = write!(out, " {v}");
    }
    out.push('\n');
}

fn lower_triangle(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..=i).map(move |j| m[(i, j)]))
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

type NumberedLine<'a> = (usize, &'a str);

fn next_content_line<'a>(
    lines: &mut impl Iterator<Item = NumberedLine<'a>>,
) -> Option<NumberedLine<'a>> {
    lines.find(|(_, l)| !l.trim().is_empty())
}

fn parse_field<T: std::str::FromStr>((lineno, line): NumberedLine, label: &str) -> Result<T> {
    let rest = line
        .strip_prefix(label)
        .and_then(|r| r.strip_prefix(' '))
        .ok_or_else(|| bad(format!("line {}: expected {label:?} field", lineno + 1)))?;
    rest.trim()
        .parse()
        .map_err(|_| bad(format!("line {}: cannot parse {label} value {rest:?}", lineno + 1)))
}

fn read_values<'a>(
    lines: &mut impl Iterator<Item = NumberedLine<'a>>,
    label: &str,
    expect: usize,
) -> Result<Vec<f64>> {
    let (lineno, line) =
        next_content_line(lines).ok_or_else(|| bad(format!("missing {label} line")))?;
    let rest = line
        .strip_prefix(label)
        .ok_or_else(|| bad(format!("line {}: expected {label:?} field", lineno + 1)))?;
    let values: Vec<f64> = rest
        .split_ascii_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .map_err(|_| bad(format!("line {}: bad float {tok:?} in {label}", lineno + 1)))
        })
        .collect::<Result<_>>()?;
    if values.len() != expect {
        return Err(bad(format!(
            "line {}: {label} carries {} values, expected {expect}",
            lineno + 1,
            values.len()
        )));
    }
    Ok(values)
}

fn read_vector<'a>(
    lines: &mut impl Iterator<Item = NumberedLine<'a>>,
    label: &str,
    k: usize,
) -> Result<DVector<f64>> {
    Ok(DVector::from_vec(read_values(lines, label, k)?))
}

fn read_lower_triangle<'a>(
    lines: &mut impl Iterator<Item = NumberedLine<'a>>,
    label: &str,
    k: usize,
) -> Result<DMatrix<f64>> {
    let values = read_values(lines, label, k * (k + 1) / 2)?;
    let mut m = DMatrix::zeros(k, k);
    let mut it = values.into_iter();
    for i in 0..k {
        for j in 0..=i {
            let v = it.next().expect("length checked");
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

fn read_full_matrix<'a>(
    lines: &mut impl Iterator<Item = NumberedLine<'a>>,
    label: &str,
    k: usize,
) -> Result<DMatrix<f64>> {
    let values = read_values(lines, label, k * k)?;
    Ok(DMatrix::from_row_slice(k, k, &values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{Family, Link};
    use crate::filter::{DynamicsSpec, UpdateMode};
    use crate::signal::{Context, SignalModel};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn worked_filter(seed: u64, steps: u64) -> DecoupledFilter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rank = 3;
        let spec = DynamicsSpec::drifting(
            0.99,
            DMatrix::identity(rank, rank) * 0.01,
            DVector::from_element(rank, 0.2),
            DMatrix::identity(rank, rank) * 0.5,
        );
        let model = SignalModel::mf("user", "item", rank).unwrap();
        let defaults = HashMap::from([
            ("user".to_string(), spec.clone()),
            ("item".to_string(), spec),
        ]);
        let mut filter =
            DecoupledFilter::new(model, Family::bernoulli(), Link::Canonical, defaults).unwrap();
        for t in 1..=steps {
            let ctx = Context::Mf {
                user: EntityId::new("user", rng.gen_range(0..5)),
                item: EntityId::new("item", rng.gen_range(0..4)),
            };
            let y = DVector::from_element(1, f64::from(rng.gen_bool(0.5)));
            filter.update(t, &ctx, &y, UpdateMode::Dekf).unwrap();
        }
        filter
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_identical() {
        let filter = worked_filter(5, 200);
        let text = to_string(&filter).unwrap();

        let mut restored = worked_filter(99, 0);
        from_str(&mut restored, &text).unwrap();
        assert_eq!(restored.len(), filter.len());
        for id in filter.entity_ids() {
            assert_eq!(restored.posterior(id).unwrap(), filter.posterior(id).unwrap());
        }

        let text2 = to_string(&restored).unwrap();
        assert_eq!(text, text2, "re-export must be byte-identical");
    }

    #[test]
    fn files_round_trip_via_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.snapshot");
        let filter = worked_filter(7, 50);
        export_to_path(&filter, &path).unwrap();

        let mut restored = worked_filter(7, 0);
        import_from_path(&mut restored, &path).unwrap();
        let path2 = dir.path().join("post2.snapshot");
        export_to_path(&restored, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn import_replaces_existing_state() {
        let source = worked_filter(11, 150);
        let text = to_string(&source).unwrap();
        // A filter that has seen different data gets fully overwritten for
        // the entities in the snapshot.
        let mut target = worked_filter(12, 60);
        from_str(&mut target, &text).unwrap();
        for id in source.entity_ids() {
            assert_eq!(target.posterior(id), source.posterior(id));
        }
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let filter = worked_filter(13, 20);
        let good = to_string(&filter).unwrap();

        let mut f = worked_filter(13, 0);
        assert!(from_str(&mut f, "").is_err());
        assert!(from_str(&mut f, "not-a-snapshot v9\nentities 0\n").is_err());

        // Truncation: drop the last line.
        let truncated: String = {
            let mut lines: Vec<&str> = good.lines().collect();
            lines.pop();
            lines.join("\n")
        };
        assert!(from_str(&mut f, &truncated).is_err());

        // Corrupt a float.
        let corrupted = good.replacen("mean ", "mean oops ", 1);
        assert!(from_str(&mut f, &corrupted).is_err());

        // Claim a different count than the records present.
        let miscounted = good.replacen("entities ", "entities 1", 1);
        assert!(from_str(&mut f, &miscounted).is_err());
    }

    #[test]
    fn dimension_mismatch_against_model_is_rejected() {
        let filter = worked_filter(17, 20);
        let text = to_string(&filter).unwrap();

        // Same namespaces, different rank: every record is now the wrong size.
        let model = SignalModel::mf("user", "item", 2).unwrap();
        let spec = DynamicsSpec::drifting(
            0.99,
            DMatrix::identity(2, 2) * 0.01,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        );
        let defaults = HashMap::from([
            ("user".to_string(), spec.clone()),
            ("item".to_string(), spec),
        ]);
        let mut wrong =
            DecoupledFilter::new(model, Family::bernoulli(), Link::Canonical, defaults).unwrap();
        match from_str(&mut wrong, &text) {
            Err(DekfError::DimensionMismatch(_)) => {}
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn unknown_entities_are_rejected() {
        let filter = worked_filter(19, 20);
        let text = to_string(&filter).unwrap();
        let model = SignalModel::glm(vec![(EntityId::new("theta", 0), 3)]).unwrap();
        let spec = DynamicsSpec::fixed(
            0.5,
            DMatrix::zeros(3, 3),
            DVector::zeros(3),
            DMatrix::identity(3, 3),
        );
        let defaults = HashMap::from([("theta".to_string(), spec)]);
        let mut other =
            DecoupledFilter::new(model, Family::bernoulli(), Link::Canonical, defaults).unwrap();
        assert!(matches!(
            from_str(&mut other, &text),
            Err(DekfError::ConfigError(_))
        ));
    }

    #[test]
    fn extreme_floats_survive_the_decimal_encoding() {
        // Subnormals, negative zero, and long-mantissa values all round-trip
        // through the shortest-decimal form bit for bit.
        let k = 2;
        let model = SignalModel::glm(vec![(EntityId::new("theta", 0), k)]).unwrap();
        let spec = DynamicsSpec::fixed(
            0.5,
            DMatrix::zeros(k, k),
            DVector::zeros(k),
            DMatrix::identity(k, k),
        );
        let defaults = HashMap::from([("theta".to_string(), spec)]);
        let mk = || {
            DecoupledFilter::new(
                model.clone(),
                Family::bernoulli(),
                Link::Canonical,
                defaults.clone(),
            )
            .unwrap()
        };
        let mut filter = mk();
        let post = EntityPosterior {
            mean: DVector::from_column_slice(&[-0.0, 1.0 / 3.0]),
            cov: DMatrix::from_column_slice(k, k, &[f64::MIN_POSITIVE, 5e-324, 5e-324, 0.1 + 0.2]),
            ref_mean: DVector::from_column_slice(&[core::f64::consts::PI, -1e300]),
            ref_cross: DMatrix::from_column_slice(k, k, &[1e-300, -2.5, 0.3, 4.0]),
            ref_cov: DMatrix::identity(k, k),
            last_t: u64::MAX,
        };
        filter
            .insert_posterior(EntityId::new("theta", 0), post.clone())
            .unwrap();
        let text = to_string(&filter).unwrap();
        let mut restored = mk();
        from_str(&mut restored, &text).unwrap();
        let got = restored.posterior(&EntityId::new("theta", 0)).unwrap();
        assert_eq!(got.mean[0].to_bits(), post.mean[0].to_bits(), "negative zero");
        assert_eq!(got, &post);
    }
}
