//! Dataset directory persistence.
//!
//! Layout: `edges.txt` (edge list), `x.csv`, `t.csv`, `z.csv`, `y.csv`,
//! `noise.csv`, optional `latents_{i,c,n}.csv`, and `meta.json`. CSVs are
//! headerless with one unit per row; floats are written in shortest
//! round-trip form so reads are bit-lossless. The oracle is not stored: it is
//! re-materialized from the latents, the network, and the generator record.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datagen::semisynthetic::semisynthetic_oracle;
use crate::datagen::synthetic::synthetic_oracle;
use crate::datagen::{GeneratorRecord, LatentBlocks, NetworkDataset, Split};
use crate::error::{Error, Result};
use crate::netgraph::{ExposureVector, Network};

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    schema_version: u32,
    n: usize,
    d_x: usize,
    latent_dims: Option<(usize, usize, usize)>,
    split_mask: Option<Vec<Split>>,
    generator: GeneratorRecord,
}

/// Writes every dataset field into `dir`, creating it if needed.
pub fn write_dataset(dataset: &NetworkDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    dataset.network.write_edge_list(dir.join("edges.txt"))?;
    write_matrix_csv(dir.join("x.csv"), &dataset.x)?;
    write_int_column(dir.join("t.csv"), &dataset.t)?;
    write_float_column(dir.join("z.csv"), dataset.z.values())?;
    write_float_column(dir.join("y.csv"), &dataset.y)?;
    write_float_column(dir.join("noise.csv"), &dataset.noise_y)?;
    if let Some(latents) = &dataset.latents {
        write_matrix_csv(dir.join("latents_i.csv"), &latents.u_i)?;
        write_matrix_csv(dir.join("latents_c.csv"), &latents.u_c)?;
        write_matrix_csv(dir.join("latents_n.csv"), &latents.u_n)?;
    }

    let meta = DatasetMeta {
        schema_version: SCHEMA_VERSION,
        n: dataset.n(),
        d_x: dataset.d_x(),
        latent_dims: dataset.latents.as_ref().map(LatentBlocks::dims),
        split_mask: dataset.split_mask.clone(),
        generator: dataset.generator.clone(),
    };
    let path = dir.join("meta.json");
    let body = serde_json::to_string_pretty(&meta).map_err(|e| Error::io(&path, e))?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))
}

/// Reads a dataset directory back, validates cross-field consistency, and
/// re-materializes the potential-outcome oracle when latents are present.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<NetworkDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_body = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&meta_body).map_err(|e| Error::io(&meta_path, e))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::io(
            &meta_path,
            format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                meta.schema_version
            ),
        ));
    }

    let network = Network::read_edge_list(dir.join("edges.txt"))?;
    let x = read_matrix_csv(dir.join("x.csv"))?;
    let t = read_int_column(dir.join("t.csv"))?;
    let z = ExposureVector::new(read_float_column(dir.join("z.csv"))?)?;
    let y = read_float_column(dir.join("y.csv"))?;
    let noise_y = read_float_column(dir.join("noise.csv"))?;

    let latents = if dir.join("latents_i.csv").exists() {
        Some(LatentBlocks::new(
            read_matrix_csv(dir.join("latents_i.csv"))?,
            read_matrix_csv(dir.join("latents_c.csv"))?,
            read_matrix_csv(dir.join("latents_n.csv"))?,
        )?)
    } else {
        None
    };

    let oracle = match (&latents, &meta.generator) {
        (Some(l), GeneratorRecord::Synthetic { .. }) => Some(synthetic_oracle(l, &network)),
        (
            Some(l),
            GeneratorRecord::Semisynthetic {
                outcome_kind,
                hete_second_term_uses_z,
                w4,
                w5,
                w6,
                w7,
                ..
            },
        ) => Some(semisynthetic_oracle(
            l,
            &network,
            w4,
            w5,
            w6,
            w7,
            *outcome_kind,
            *hete_second_term_uses_z,
        )),
        (None, _) => None,
    };

    let dataset = NetworkDataset {
        network,
        x,
        t,
        z,
        y,
        latents,
        oracle,
        split_mask: meta.split_mask,
        noise_y,
        generator: meta.generator,
    };
    if dataset.n() != meta.n || dataset.d_x() != meta.d_x {
        return Err(Error::io(
            &meta_path,
            format!(
                "metadata names n={}, d_x={} but files hold n={}, d_x={}",
                meta.n,
                meta.d_x,
                dataset.n(),
                dataset.d_x()
            ),
        ));
    }
    dataset.validate()?;
    Ok(dataset)
}

fn write_matrix_csv(path: impl AsRef<Path>, m: &Array2<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut body = String::new();
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        body.push_str(&line.join(","));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.parse::<f64>()
                    .map_err(|e| Error::io(path, format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::io(
                    path,
                    format!("line {}: ragged row width", lineno + 1),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::io(path, "empty matrix file"));
    }
    let ncols = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let nrows = flat.len() / ncols;
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| Error::io(path, e))
}

fn write_float_column(path: impl AsRef<Path>, v: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut body = String::new();
    for value in v {
        body.push_str(&format!("{value}\n"));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_float_column(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .map(|(lineno, line)| {
            line.parse::<f64>()
                .map_err(|e| Error::io(path, format!("line {}: {e}", lineno + 1)))
        })
        .collect()
}

fn write_int_column(path: impl AsRef<Path>, v: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut body = String::new();
    for value in v {
        body.push_str(&format!("{value}\n"));
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_int_column(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    body.lines()
        .enumerate()
        .map(|(lineno, line)| {
            line.parse::<u8>()
                .map_err(|e| Error::io(path, format!("line {}: {e}", lineno + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        gen_semisynthetic, gen_synthetic, CovariateSource, OutcomeKind,
    };
    use crate::netgraph::generate_random_graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthetic_round_trip_is_lossless() {
        let ds = gen_synthetic(80, 4.0, 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();

        assert_eq!(ds.x, back.x);
        assert_eq!(ds.t, back.t);
        assert_eq!(ds.z.values(), back.z.values());
        assert_eq!(ds.y, back.y);
        assert_eq!(ds.noise_y, back.noise_y);
        assert_eq!(ds.latents, back.latents);
        assert_eq!(ds.split_mask, back.split_mask);
        assert_eq!(ds.generator, back.generator);
        assert_eq!(ds.network.edges(), back.network.edges());
        assert_eq!(ds.oracle, back.oracle);
    }

    #[test]
    fn semisynthetic_round_trip_rebuilds_the_oracle_exactly() {
        let network = generate_random_graph(90, 4.0, 2).unwrap();
        let ds = gen_semisynthetic(
            CovariateSource::StandIn { n: 90, d: 9, seed: 2 },
            &network,
            OutcomeKind::Hete,
            2,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();

        let before = ds.oracle.as_ref().unwrap();
        let after = back.oracle.as_ref().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let i = rng.random_range(0..ds.n());
            assert_eq!(before.evaluate(i, 1, 0.5), after.evaluate(i, 1, 0.5));
        }
        assert_eq!(before, after);
    }

    #[test]
    fn missing_edge_list_names_the_file() {
        let ds = gen_synthetic(40, 3.0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("edges.txt")).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Io { path, .. }) => assert!(path.contains("edges.txt"), "{path}"),
            other => panic!("expected I/O error, got {other:?}"),
        }
    }

    #[test]
    fn schema_version_mismatch_names_meta_json() {
        let ds = gen_synthetic(40, 3.0, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let tampered = fs::read_to_string(&meta_path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        fs::write(&meta_path, tampered).unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Io { path, message }) => {
                assert!(path.contains("meta.json"), "{path}");
                assert!(message.contains("schema"), "{message}");
            }
            other => panic!("expected I/O error, got {other:?}"),
        }
    }

    #[test]
    fn float_columns_round_trip_exact_bits() {
        let values = vec![
            std::f64::consts::PI,
            -1.0 / 3.0,
            1e-300,
            6.02214076e23,
            -0.1,
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("col.csv");
        write_float_column(&path, &values).unwrap();
        let back = read_float_column(&path).unwrap();
        for (a, b) in values.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn tampered_exposure_fails_validation() {
        let ds = gen_synthetic(40, 3.0, 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        // Overwrite z.csv with zeros of the right length.
        let zeros = vec![0.0; ds.n()];
        write_float_column(dir.path().join("z.csv"), &zeros).unwrap();
        if ds.z.values().iter().any(|&z| z != 0.0) {
            assert!(read_dataset(dir.path()).is_err());
        }
    }
}
