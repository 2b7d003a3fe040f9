//! Persistence of posterior draws.
//!
//! Binary layout (little-endian): magic `DSSF`, `u32` version, `u32` p, k, M,
//! then per draw `p·k` loadings in row-major order followed by `p` uniqueness
//! variances, all `f64`.
//!
//! CSV layout: header `draw,entity,row,col,value`, one line per cell, with
//! `entity` either `B` (loadings) or `S` (uniqueness, `col = 0`). Indices are
//! zero-based and lines may appear in any order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::datagen::csv_err;
use crate::error::{Error, Result};
use crate::model::{LoadingsMatrix, PosteriorDraws, UniquenessDiag};

pub const DRAWS_MAGIC: [u8; 4] = *b"DSSF";
pub const DRAWS_VERSION: u32 = 1;

pub fn write_draws(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&DRAWS_MAGIC)?;
    put(&DRAWS_VERSION.to_le_bytes())?;
    for dim in [draws.p(), draws.k(), draws.len()] {
        let dim = u32::try_from(dim).map_err(|_| Error::InvalidValue("dimension exceeds u32".into()))?;
        put(&dim.to_le_bytes())?;
    }
    for (b, s) in draws.loadings().iter().zip(draws.uniqueness()) {
        for v in b.to_row_major() {
            put(&v.to_le_bytes())?;
        }
        for v in s.as_slice() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_draws(path: &Path) -> Result<PosteriorDraws> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_draws(&bytes, path)
}

fn decode_draws(bytes: &[u8], path: &Path) -> Result<PosteriorDraws> {
    const HEADER: usize = 4 + 4 * 4;
    if bytes.len() < HEADER {
        return Err(Error::format(path, "truncated header"));
    }
    if bytes[..4] != DRAWS_MAGIC {
        return Err(Error::format(path, "bad magic bytes"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let version = u32_at(4);
    if version != DRAWS_VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let (p, k, m) = (u32_at(8), u32_at(12), u32_at(16));
    if p == 0 || k == 0 || m == 0 {
        return Err(Error::format(path, format!("empty dimensions p={p} k={k} M={m}")));
    }
    let per_draw = p * k + p;
    let expected = HEADER + 8 * per_draw * m;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let values: Vec<f64> = bytes[HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut loadings = Vec::with_capacity(m);
    let mut uniqueness = Vec::with_capacity(m);
    for (d, rec) in values.chunks_exact(per_draw).enumerate() {
        let b = LoadingsMatrix::from_row_slice(p, k, &rec[..p * k])
            .map_err(|e| Error::format(path, format!("draw {d}: {e}")))?;
        let s = UniquenessDiag::from_slice(&rec[p * k..])
            .map_err(|e| Error::format(path, format!("draw {d}: {e}")))?;
        loadings.push(b);
        uniqueness.push(s);
    }
    PosteriorDraws::new(loadings, uniqueness, format!("file:{}", path.display()))
}

pub fn write_draws_csv(draws: &PosteriorDraws, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["draw", "entity", "row", "col", "value"])
        .map_err(|e| csv_err(path, e))?;
    for (d, (b, s)) in draws.loadings().iter().zip(draws.uniqueness()).enumerate() {
        let bm = b.as_matrix();
        for j in 0..b.p() {
            for q in 0..b.k() {
                w.write_record([d.to_string(), "B".into(), j.to_string(), q.to_string(), bm[(j, q)].to_string()])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        for (j, v) in s.as_slice().iter().enumerate() {
            w.write_record([d.to_string(), "S".into(), j.to_string(), "0".into(), v.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_draws_csv(path: &Path) -> Result<PosteriorDraws> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != ["draw", "entity", "row", "col", "value"] {
        return Err(Error::format(path, format!("unexpected header {names:?}")));
    }
    let mut cells: Vec<(usize, bool, usize, usize, f64)> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", line + 2));
        let idx = |i: usize, what: &str| rec.get(i).and_then(|s| s.trim().parse::<usize>().ok()).ok_or_else(|| bad(what));
        let draw = idx(0, "draw")?;
        let is_loading = match rec.get(1).map(str::trim) {
            Some("B") => true,
            Some("S") => false,
            _ => return Err(bad("entity")),
        };
        let row = idx(2, "row")?;
        let col = idx(3, "col")?;
        let value: f64 = rec.get(4).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("value"))?;
        if !is_loading && col != 0 {
            return Err(bad("col for S entity"));
        }
        cells.push((draw, is_loading, row, col, value));
    }
    if cells.is_empty() {
        return Err(Error::format(path, "no draws"));
    }
    let m = cells.iter().map(|c| c.0).max().unwrap() + 1;
    let p = cells.iter().map(|c| c.2).max().unwrap() + 1;
    let k = cells.iter().filter(|c| c.1).map(|c| c.3).max().map_or(0, |c| c + 1);
    if k == 0 {
        return Err(Error::format(path, "no loadings entries"));
    }
    let mut b_vals = vec![vec![f64::NAN; p * k]; m];
    let mut s_vals = vec![vec![f64::NAN; p]; m];
    for (d, is_loading, row, col, v) in cells {
        let slot = if is_loading {
            &mut b_vals[d][row * k + col]
        } else {
            &mut s_vals[d][row]
        };
        if !slot.is_nan() {
            return Err(Error::format(path, format!("duplicate cell in draw {d}")));
        }
        *slot = v;
    }
    let mut loadings = Vec::with_capacity(m);
    let mut uniqueness = Vec::with_capacity(m);
    for d in 0..m {
        if b_vals[d].iter().chain(&s_vals[d]).any(|v| v.is_nan()) {
            return Err(Error::format(path, format!("draw {d} is incomplete")));
        }
        loadings.push(
            LoadingsMatrix::from_row_slice(p, k, &b_vals[d]).map_err(|e| Error::format(path, format!("draw {d}: {e}")))?,
        );
        uniqueness.push(UniquenessDiag::from_slice(&s_vals[d]).map_err(|e| Error::format(path, format!("draw {d}: {e}")))?);
    }
    PosteriorDraws::new(loadings, uniqueness, format!("csv:{}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    fn draws_from(seed: u64, p: usize, k: usize, m: usize) -> PosteriorDraws {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = (0..m)
            .map(|_| LoadingsMatrix::new(DMatrix::from_fn(p, k, |_, _| rng.random_range(-3.0..3.0))).unwrap())
            .collect();
        let s = (0..m)
            .map(|_| UniquenessDiag::new(DVector::from_fn(p, |_, _| rng.random_range(1e-6..2.0))).unwrap())
            .collect();
        PosteriorDraws::new(b, s, "test").unwrap()
    }

    fn same_values(a: &PosteriorDraws, b: &PosteriorDraws) -> bool {
        a.loadings() == b.loadings() && a.uniqueness() == b.uniqueness()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn binary_and_csv_round_trip(seed in any::<u64>(), p in 1usize..6, k in 1usize..4, m in 1usize..5) {
            let dir = tempfile::tempdir().unwrap();
            let draws = draws_from(seed, p, k, m);
            let bin = dir.path().join("d.dssf");
            write_draws(&draws, &bin).unwrap();
            prop_assert!(same_values(&read_draws(&bin).unwrap(), &draws));
            let csv = dir.path().join("d.csv");
            write_draws_csv(&draws, &csv).unwrap();
            prop_assert!(same_values(&read_draws_csv(&csv).unwrap(), &draws));
        }
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dssf");
        write_draws(&draws_from(1, 3, 2, 4), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"DSSF");
        assert_eq!(&bytes[4..20], &[1, 0, 0, 0, 3, 0, 0, 0, 2, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(bytes.len(), 20 + 8 * 4 * (3 * 2 + 3));
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.dssf");
        write_draws(&draws_from(1, 2, 1, 2), &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(decode_draws(&bad_magic, &path).is_err());

        let mut bad_version = good.clone();
        bad_version[4] = 2;
        assert!(decode_draws(&bad_version, &path).is_err());

        assert!(decode_draws(&good[..good.len() - 3], &path).is_err());

        // First draw's first uniqueness entry sits after p·k = 2 loadings.
        let mut zero_s = good.clone();
        let off = 20 + 8 * 2;
        zero_s[off..off + 8].copy_from_slice(&0.0f64.to_le_bytes());
        let err = decode_draws(&zero_s, &path).unwrap_err();
        assert!(err.to_string().contains("uniqueness"), "{err}");
    }

    #[test]
    fn external_csv_fixture_parses() {
        // Hand-written export in the shape an external sampler would produce,
        // lines shuffled and whitespace around fields.
        let text = "draw,entity,row,col,value\n\
                    1,S,1,0,0.25\n\
                    0,B,0,0,0.5\n\
                    0,B,0,1,-0.125\n\
                    0,B,1,0,1.5\n\
                    0,B,1,1,2\n\
                    0,S,0,0,0.75\n\
                    0,S,1,0,1.25\n\
                    1,B,0,0, -0.5\n\
                    1,B,0,1,0.125\n\
                    1,B,1,0,-1.5\n\
                    1,B,1,1,-2\n\
                    1,S,0,0,0.75\n";
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.csv");
        std::fs::write(&path, text).unwrap();
        let draws = read_draws_csv(&path).unwrap();
        assert_eq!((draws.p(), draws.k(), draws.len()), (2, 2, 2));
        assert_eq!(draws.loadings()[0].to_row_major(), vec![0.5, -0.125, 1.5, 2.0]);
        assert_eq!(draws.loadings()[1].to_row_major(), vec![-0.5, 0.125, -1.5, -2.0]);
        assert_eq!(draws.uniqueness()[1].as_slice(), &[0.75, 0.25]);

        std::fs::write(&path, text.replace("0,S,1,0,1.25", "0,S,1,0,0.0")).unwrap();
        assert!(read_draws_csv(&path).is_err());
        std::fs::write(&path, text.replace("0,S,1,0,1.25\n", "")).unwrap();
        assert!(read_draws_csv(&path).is_err());
    }
}
