//! Toy residual vector quantization codec.
//!
//! Stands in for a neural audio codec: K codebooks are fitted sequentially
//! with k-means, each on the residual left by the previous stages. Encoding
//! greedily quantizes each frame stage by stage; decoding sums the selected
//! centroids.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::container::{read_container, write_container, ArrayData};
use crate::error::{Error, Result};

/// Codec token rate; speech tokens are emitted at this rate.
pub const CODEC_FRAME_RATE_HZ: u32 = 50;

/// Number of k-means iterations used when fitting each codebook.
pub const KMEANS_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Number of residual codebooks K.
    pub num_codebooks: usize,
    /// Vocabulary size V per codebook.
    pub vocab_size: usize,
    /// Dimensionality F of one frame vector.
    pub frame_dim: usize,
    /// Token rate in Hz; always 50.
    pub frame_rate_hz: u32,
}

impl CodecConfig {
    pub fn new(num_codebooks: usize, vocab_size: usize, frame_dim: usize) -> Result<Self> {
        let cfg = CodecConfig {
            num_codebooks,
            vocab_size,
            frame_dim,
            frame_rate_hz: CODEC_FRAME_RATE_HZ,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_codebooks < 1 {
            return Err(Error::validation("num_codebooks must be >= 1"));
        }
        if self.vocab_size < 2 {
            return Err(Error::validation("vocab_size must be >= 2"));
        }
        if self.frame_dim < 1 {
            return Err(Error::validation("frame_dim must be >= 1"));
        }
        if self.frame_rate_hz != CODEC_FRAME_RATE_HZ {
            return Err(Error::validation(format!(
                "frame_rate_hz must be {CODEC_FRAME_RATE_HZ}"
            )));
        }
        Ok(())
    }
}

/// A [T x K] grid of codec tokens. Each entry is in [0, V) or equals the
/// reserved EMPTY id V, which only appears in delayed grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    tokens: Vec<u32>,
    num_frames: usize,
    num_codebooks: usize,
    vocab_size: u32,
}

impl TokenGrid {
    pub fn from_rows(rows: &[Vec<u32>], vocab_size: u32) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("token grid must have at least one row"));
        }
        let k = rows[0].len();
        if k == 0 {
            return Err(Error::validation("token grid rows must be non-empty"));
        }
        let mut tokens = Vec::with_capacity(rows.len() * k);
        for row in rows {
            if row.len() != k {
                return Err(Error::validation("token grid must be rectangular"));
            }
            for &t in row {
                if t > vocab_size {
                    return Err(Error::validation(format!(
                        "token {t} out of range for vocab {vocab_size}"
                    )));
                }
                tokens.push(t);
            }
        }
        Ok(TokenGrid {
            tokens,
            num_frames: rows.len(),
            num_codebooks: k,
            vocab_size,
        })
    }

    pub fn from_flat(
        tokens: Vec<u32>,
        num_frames: usize,
        num_codebooks: usize,
        vocab_size: u32,
    ) -> Result<Self> {
        if tokens.len() != num_frames * num_codebooks {
            return Err(Error::validation("flat token length mismatch"));
        }
        if tokens.iter().any(|&t| t > vocab_size) {
            return Err(Error::validation("token out of range"));
        }
        Ok(TokenGrid {
            tokens,
            num_frames,
            num_codebooks,
            vocab_size,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_codebooks(&self) -> usize {
        self.num_codebooks
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// The reserved EMPTY id (equal to the vocabulary size).
    pub fn empty_id(&self) -> u32 {
        self.vocab_size
    }

    pub fn get(&self, frame: usize, codebook: usize) -> u32 {
        self.tokens[frame * self.num_codebooks + codebook]
    }

    pub fn row(&self, frame: usize) -> &[u32] {
        let k = self.num_codebooks;
        &self.tokens[frame * k..(frame + 1) * k]
    }

    /// True when no entry equals EMPTY.
    pub fn is_canonical(&self) -> bool {
        let empty = self.empty_id();
        self.tokens.iter().all(|&t| t != empty)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(self.num_codebooks)
    }

    pub fn to_i64_array(&self) -> ndarray::ArrayD<i64> {
        ndarray::Array2::from_shape_vec(
            (self.num_frames, self.num_codebooks),
            self.tokens.iter().map(|&t| t as i64).collect(),
        )
        .expect("shape consistent")
        .into_dyn()
    }

    pub fn from_i64_array(arr: &ndarray::ArrayD<i64>, vocab_size: u32) -> Result<Self> {
        if arr.ndim() != 2 {
            return Err(Error::Format("token array must be 2-d".into()));
        }
        let t = arr.shape()[0];
        let k = arr.shape()[1];
        let mut tokens = Vec::with_capacity(t * k);
        for &v in arr.iter() {
            if v < 0 || v as u32 > vocab_size {
                return Err(Error::Format(format!("token {v} out of range")));
            }
            tokens.push(v as u32);
        }
        TokenGrid::from_flat(tokens, t, k, vocab_size)
    }
}

/// K fitted centroid tables in residual order: table k quantizes the residual
/// left after tables 0..k-1.
#[derive(Debug, Clone)]
pub struct Codebooks {
    config: CodecConfig,
    tables: Vec<Array2<f64>>,
}

impl Codebooks {
    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn table(&self, k: usize) -> &Array2<f64> {
        &self.tables[k]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "format": "codebooks",
            "num_codebooks": self.config.num_codebooks,
            "vocab_size": self.config.vocab_size,
            "frame_dim": self.config.frame_dim,
            "frame_rate_hz": self.config.frame_rate_hz,
        });
        let arrays: Vec<(String, ArrayData)> = self
            .tables
            .iter()
            .enumerate()
            .map(|(k, t)| (format!("table.{k}"), ArrayData::F64(t.clone().into_dyn())))
            .collect();
        write_container(path, &meta, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, arrays) = read_container(path)?;
        if meta["format"] != "codebooks" {
            return Err(Error::Format("not a codebooks file".into()));
        }
        let get = |key: &str| -> Result<usize> {
            meta[key]
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("missing field '{key}'")))
        };
        let config = CodecConfig {
            num_codebooks: get("num_codebooks")?,
            vocab_size: get("vocab_size")?,
            frame_dim: get("frame_dim")?,
            frame_rate_hz: get("frame_rate_hz")? as u32,
        };
        config.validate()?;
        let mut tables = Vec::with_capacity(config.num_codebooks);
        for k in 0..config.num_codebooks {
            let arr = arrays
                .get(&format!("table.{k}"))
                .ok_or_else(|| Error::Format(format!("missing table.{k}")))?
                .as_f64()?;
            let t = arr
                .clone()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::Format(format!("table.{k}: {e}")))?;
            if t.shape() != [config.vocab_size, config.frame_dim] {
                return Err(Error::Format(format!("table.{k} has wrong shape")));
            }
            tables.push(t);
        }
        Ok(Codebooks { config, tables })
    }
}

fn check_finite(frames: &ArrayView2<f64>) -> Result<()> {
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("frames contain non-finite values"));
    }
    Ok(())
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid by squared distance; ties go to the lowest index.
fn nearest_centroid(frame: ArrayView1<f64>, table: &Array2<f64>) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (i, c) in table.rows().into_iter().enumerate() {
        let d = sq_dist(frame, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    (best, best_d)
}

/// Plain k-means with a fixed iteration count. Initialization samples `k`
/// distinct row indices; empty clusters are reseeded from the farthest point.
fn kmeans_fixed(data: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = data.nrows();
    let dim = data.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, n, k);
    let mut centroids = Array2::<f64>::zeros((k, dim));
    for (c, i) in init.into_iter().enumerate() {
        centroids.row_mut(c).assign(&data.row(i));
    }

    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    for _ in 0..KMEANS_ITERS {
        for i in 0..n {
            let (c, d) = nearest_centroid(data.row(i), &centroids);
            assign[i] = c;
            dists[i] = d;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assign[i];
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &data.row(i);
        }
        let mut reseeded = Vec::new();
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed from the point farthest from its assigned centroid.
                let far = (0..n)
                    .filter(|i| !reseeded.contains(i))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]))
                    .expect("n >= k >= 1");
                centroids.row_mut(c).assign(&data.row(far));
                reseeded.push(far);
            } else {
                let inv = 1.0 / counts[c] as f64;
                let mut row = centroids.row_mut(c);
                row.assign(&sums.row(c));
                row *= inv;
            }
        }
    }
    centroids
}

/// Fit K residual codebooks on `frames`, deterministically for a given seed.
pub fn fit_codebooks(
    frames: ArrayView2<f64>,
    config: &CodecConfig,
    seed: u64,
) -> Result<Codebooks> {
    config.validate()?;
    check_finite(&frames)?;
    if frames.ncols() != config.frame_dim {
        return Err(Error::validation(format!(
            "frame dim {} does not match config frame_dim {}",
            frames.ncols(),
            config.frame_dim
        )));
    }
    if frames.nrows() < config.vocab_size {
        return Err(Error::InsufficientData(format!(
            "need at least vocab_size={} frames, got {}",
            config.vocab_size,
            frames.nrows()
        )));
    }
    let mut residual = frames.to_owned();
    let mut tables = Vec::with_capacity(config.num_codebooks);
    for k in 0..config.num_codebooks {
        let table = kmeans_fixed(&residual, config.vocab_size, seed.wrapping_add(k as u64));
        for mut row in residual.rows_mut() {
            let (c, _) = nearest_centroid(row.view(), &table);
            row -= &table.row(c);
        }
        tables.push(table);
    }
    Ok(Codebooks {
        config: config.clone(),
        tables,
    })
}

/// Greedy residual quantization of each frame into a canonical token grid.
pub fn rvq_encode(frames: ArrayView2<f64>, books: &Codebooks) -> Result<TokenGrid> {
    if frames.ncols() != books.config.frame_dim {
        return Err(Error::validation(format!(
            "frame dim {} does not match codebook frame_dim {}",
            frames.ncols(),
            books.config.frame_dim
        )));
    }
    if frames.nrows() == 0 {
        return Err(Error::validation("cannot encode zero frames"));
    }
    check_finite(&frames)?;
    let k_books = books.config.num_codebooks;
    let mut tokens = Vec::with_capacity(frames.nrows() * k_books);
    let mut residual = ndarray::Array1::<f64>::zeros(frames.ncols());
    for frame in frames.rows() {
        residual.assign(&frame);
        for table in &books.tables {
            let (c, _) = nearest_centroid(residual.view(), table);
            residual -= &table.row(c);
            tokens.push(c as u32);
        }
    }
    TokenGrid::from_flat(
        tokens,
        frames.nrows(),
        k_books,
        books.config.vocab_size as u32,
    )
}

/// Reconstruct frames as the sum over codebooks of the selected centroids.
pub fn rvq_decode(grid: &TokenGrid, books: &Codebooks) -> Result<Array2<f64>> {
    if grid.num_codebooks() != books.config.num_codebooks {
        return Err(Error::validation("grid codebook count mismatch"));
    }
    if grid.vocab_size() != books.config.vocab_size as u32 {
        return Err(Error::validation("grid vocab size mismatch"));
    }
    if !grid.is_canonical() {
        return Err(Error::validation(
            "cannot decode a grid containing EMPTY tokens",
        ));
    }
    let mut out = Array2::<f64>::zeros((grid.num_frames(), books.config.frame_dim));
    for (t, row) in grid.rows().enumerate() {
        let mut frame = out.row_mut(t);
        for (k, &tok) in row.iter().enumerate() {
            frame += &books.tables[k].row(tok as usize);
        }
    }
    Ok(out)
}

/// Mean squared reconstruction error of encoding `frames` with `books`.
pub fn reconstruction_mse(frames: ArrayView2<f64>, books: &Codebooks) -> Result<f64> {
    let grid = rvq_encode(frames, books)?;
    let decoded = rvq_decode(&grid, books)?;
    let diff = &decoded - &frames;
    Ok(diff.iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::Rng;

    fn one_hot_frames(v: usize) -> Array2<f64> {
        let mut frames = Array2::<f64>::zeros((v, v));
        for i in 0..v {
            frames[[i, i]] = 1.0;
        }
        frames
    }

    #[test]
    fn one_hot_fixed_point() {
        // V distinct one-hot vectors, K=1: each centroid equals one input
        // vector, so quantization error is exactly zero.
        let v = 8;
        let frames = one_hot_frames(v);
        let cfg = CodecConfig::new(1, v, v).unwrap();
        let books = fit_codebooks(frames.view(), &cfg, 7).unwrap();
        let mse = reconstruction_mse(frames.view(), &books).unwrap();
        assert_eq!(mse, 0.0);
        // Every input appears exactly once among the centroids.
        for frame in frames.rows() {
            let (_, d) = super::nearest_centroid(frame, books.table(0));
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn gaussian_clusters_match_bruteforce_assignment() {
        // Brute-force oracle: assign each point to the nearest true mean.
        // The fitted codebook must agree on at least 95% of points.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let means = [
            [10.0, 0.0],
            [-10.0, 0.0],
            [0.0, 10.0],
            [0.0, -10.0],
        ];
        let n_per = 100;
        let mut data = Array2::<f64>::zeros((4 * n_per, 2));
        let mut true_label = vec![0usize; 4 * n_per];
        for c in 0..4 {
            for i in 0..n_per {
                let r = c * n_per + i;
                data[[r, 0]] = means[c][0] + rng.random_range(-1.0..1.0);
                data[[r, 1]] = means[c][1] + rng.random_range(-1.0..1.0);
                true_label[r] = c;
            }
        }
        let cfg = CodecConfig::new(1, 4, 2).unwrap();
        let books = fit_codebooks(data.view(), &cfg, 3).unwrap();
        let grid = rvq_encode(data.view(), &books).unwrap();

        // Oracle assignment from the true means.
        let mut oracle = vec![0usize; data.nrows()];
        for i in 0..data.nrows() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, m) in means.iter().enumerate() {
                let d = (data[[i, 0]] - m[0]).powi(2) + (data[[i, 1]] - m[1]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            oracle[i] = best;
        }
        // Account for label permutation: map each fitted token to the
        // majority oracle label among its points.
        let mut perm = [0usize; 4];
        for tok in 0..4 {
            let mut counts = [0usize; 4];
            for i in 0..data.nrows() {
                if grid.get(i, 0) as usize == tok {
                    counts[oracle[i]] += 1;
                }
            }
            perm[tok] = counts
                .iter()
                .enumerate()
                .max_by_key(|(_, &c)| c)
                .unwrap()
                .0;
        }
        let agree = (0..data.nrows())
            .filter(|&i| perm[grid.get(i, 0) as usize] == oracle[i])
            .count();
        assert!(
            agree as f64 >= 0.95 * data.nrows() as f64,
            "only {agree}/{} agree with oracle",
            data.nrows()
        );
    }

    #[test]
    fn residual_monotonicity() {
        // Mean squared residual over the training corpus is non-increasing in
        // the number of codebooks used: each fitted table's centroids are
        // cluster means of its residual corpus.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = Array2::from_shape_fn((200, 6), |_| rng.random_range(-1.0..1.0));
        let cfg = CodecConfig::new(3, 16, 6).unwrap();
        let books = fit_codebooks(data.view(), &cfg, 9).unwrap();
        let mut residual = data.clone();
        let mut prev = residual.iter().map(|v| v * v).sum::<f64>() / residual.len() as f64;
        for k in 0..3 {
            for mut row in residual.rows_mut() {
                let (c, _) = super::nearest_centroid(row.view(), books.table(k));
                row -= &books.table(k).row(c);
            }
            let mse = residual.iter().map(|v| v * v).sum::<f64>() / residual.len() as f64;
            assert!(mse <= prev + 1e-12, "stage {k}: {mse} > {prev}");
            prev = mse;
        }
    }

    #[test]
    fn more_codebooks_reduce_corpus_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data = Array2::from_shape_fn((50 * 4, 8), |_| rng.random_range(-1.0..1.0));
        let cfg1 = CodecConfig::new(1, 64, 8).unwrap();
        let cfg4 = CodecConfig::new(4, 64, 8).unwrap();
        let books1 = fit_codebooks(data.view(), &cfg1, 2).unwrap();
        let books4 = fit_codebooks(data.view(), &cfg4, 2).unwrap();
        let mse1 = reconstruction_mse(data.view(), &books1).unwrap();
        let mse4 = reconstruction_mse(data.view(), &books4).unwrap();
        assert!(mse4 <= mse1, "mse4={mse4} mse1={mse1}");
    }

    #[test]
    fn nearest_centroid_and_tie_break() {
        let table = array![[0.0, 0.0], [1.0, 1.0]];
        let books = Codebooks {
            config: CodecConfig::new(1, 2, 2).unwrap(),
            tables: vec![table],
        };
        let frames = array![[0.9, 1.1]];
        let grid = rvq_encode(frames.view(), &books).unwrap();
        assert_eq!(grid.get(0, 0), 1);

        // Equidistant between centroids 2 and 5: lowest index wins.
        let mut table = Array2::<f64>::zeros((8, 1));
        for i in 0..8 {
            table[[i, 0]] = 100.0 + i as f64 * 100.0;
        }
        table[[2, 0]] = 1.0;
        table[[5, 0]] = 3.0;
        let books = Codebooks {
            config: CodecConfig::new(1, 8, 1).unwrap(),
            tables: vec![table],
        };
        let grid = rvq_encode(array![[2.0]].view(), &books).unwrap();
        assert_eq!(grid.get(0, 0), 2);
    }

    #[test]
    fn centroid_pair_sum_exhaustive() {
        // Construct books whose stage-0 centroids are widely separated and
        // stage-1 centroids small, then check every (a, b) pair: the frame
        // c0[a] + c1[b] must encode to tokens (a, b) and decode exactly.
        let v = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut t0 = Array2::<f64>::zeros((v, 3));
        for i in 0..v {
            t0[[i, 0]] = (i as f64) * 50.0;
            t0[[i, 1]] = ((i * 3) % v) as f64 * 40.0;
            t0[[i, 2]] = rng.random_range(-5.0..5.0);
        }
        let t1 = Array2::from_shape_fn((v, 3), |_| rng.random_range(-0.5..0.5));
        let books = Codebooks {
            config: CodecConfig::new(2, v, 3).unwrap(),
            tables: vec![t0.clone(), t1.clone()],
        };
        for a in 0..v {
            for b in 0..v {
                let frame = &t0.row(a) + &t1.row(b);
                let frames = frame.insert_axis(ndarray::Axis(0));
                let grid = rvq_encode(frames.view(), &books).unwrap();
                assert_eq!((grid.get(0, 0), grid.get(0, 1)), (a as u32, b as u32));
                let decoded = rvq_decode(&grid, &books).unwrap();
                for (x, y) in decoded.row(0).iter().zip(frames.row(0).iter()) {
                    assert_eq!(x, y, "decode must reproduce the frame exactly");
                }
            }
        }
    }

    #[test]
    fn decode_sum_of_centroids() {
        let t0 = array![[1.0, 0.0]];
        let t1 = array![[0.0, 1.0]];
        let books = Codebooks {
            config: CodecConfig {
                num_codebooks: 2,
                vocab_size: 2,
                frame_dim: 2,
                frame_rate_hz: 50,
            },
            tables: vec![
                ndarray::concatenate![ndarray::Axis(0), t0, array![[9.0, 9.0]]],
                ndarray::concatenate![ndarray::Axis(0), t1, array![[9.0, 9.0]]],
            ],
        };
        let grid = TokenGrid::from_rows(&[vec![0, 0]], 2).unwrap();
        let frames = rvq_decode(&grid, &books).unwrap();
        assert_eq!(frames, array![[1.0, 1.0]]);
    }

    #[test]
    fn decode_rejects_empty_and_out_of_range() {
        let cfg = CodecConfig::new(1, 4, 2).unwrap();
        let data = one_hot_frames(4).slice(ndarray::s![.., ..2]).to_owned();
        let books = fit_codebooks(data.view(), &cfg, 1).unwrap();
        let grid = TokenGrid::from_rows(&[vec![4]], 4).unwrap(); // EMPTY = 4
        assert!(matches!(
            rvq_decode(&grid, &books),
            Err(Error::Validation(_))
        ));
        assert!(TokenGrid::from_rows(&[vec![5]], 4).is_err());
    }

    /// Books whose stages are cleanly separated: stage-0 centroids are far
    /// apart relative to the norms of all later stages, and within each table
    /// centroids are pairwise distinct. Greedy encoding then inverts decoding
    /// exactly.
    fn separated_books(v: usize, dim: usize, seed: u64) -> Codebooks {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t0 = Array2::<f64>::zeros((v, dim));
        for i in 0..v {
            t0[[i, 0]] = i as f64 * 1000.0;
            for j in 1..dim {
                t0[[i, j]] = rng.random_range(0.0..200.0);
            }
        }
        let t1 = Array2::from_shape_fn((v, dim), |_| rng.random_range(-1.0..1.0));
        // Pairwise-distinct precondition.
        for t in [&t0, &t1] {
            for a in 0..v {
                for b in a + 1..v {
                    assert!(sq_dist(t.row(a), t.row(b)) > 1e-6);
                }
            }
        }
        Codebooks {
            config: CodecConfig::new(2, v, dim).unwrap(),
            tables: vec![t0, t1],
        }
    }

    #[test]
    fn encode_decode_idempotent_on_decoded_frames() {
        // On stage-separated books decoded frames are exact codebook sums, so
        // decode(encode(decode(g))) == decode(g).
        let books = separated_books(8, 4, 41);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let rows: Vec<Vec<u32>> = (0..40)
            .map(|_| (0..2).map(|_| rng.random_range(0..8u32)).collect())
            .collect();
        let g = TokenGrid::from_rows(&rows, 8).unwrap();
        let dec = rvq_decode(&g, &books).unwrap();
        let g2 = rvq_encode(dec.view(), &books).unwrap();
        let dec2 = rvq_decode(&g2, &books).unwrap();
        assert_eq!(dec, dec2);
    }

    #[test]
    fn fit_requires_enough_data_and_finite_input() {
        let cfg = CodecConfig::new(1, 8, 2).unwrap();
        let small = Array2::<f64>::zeros((4, 2));
        assert!(matches!(
            fit_codebooks(small.view(), &cfg, 0),
            Err(Error::InsufficientData(_))
        ));
        let mut bad = Array2::<f64>::zeros((10, 2));
        bad[[3, 1]] = f64::NAN;
        assert!(matches!(
            fit_codebooks(bad.view(), &cfg, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn determinism_same_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let data = Array2::from_shape_fn((128, 5), |_| rng.random_range(-1.0..1.0));
        let cfg = CodecConfig::new(3, 16, 5).unwrap();
        let b1 = fit_codebooks(data.view(), &cfg, 42).unwrap();
        let b2 = fit_codebooks(data.view(), &cfg, 42).unwrap();
        for k in 0..3 {
            assert_eq!(b1.table(k), b2.table(k));
        }
        let g1 = rvq_encode(data.view(), &b1).unwrap();
        let g2 = rvq_encode(data.view(), &b2).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn save_load_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = Array2::from_shape_fn((64, 3), |_| rng.random_range(-1.0..1.0));
        let cfg = CodecConfig::new(2, 8, 3).unwrap();
        let books = fit_codebooks(data.view(), &cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("books.nac");
        books.save(&path).unwrap();
        let loaded = Codebooks::load(&path).unwrap();
        assert_eq!(loaded.config(), books.config());
        for k in 0..2 {
            assert_eq!(loaded.table(k), books.table(k));
        }
    }

    #[test]
    fn round_trip_on_separated_books() {
        // encode(decode(grid)) == grid over 1000 random grids, at V=8 and
        // V=64, on stage-separated books.
        for (v, dim, seed) in [(8usize, 4usize, 41u64), (64, 8, 43)] {
            let books = separated_books(v, dim, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            for trial in 0..1000 {
                let t = 1 + (trial % 8);
                let rows: Vec<Vec<u32>> = (0..t)
                    .map(|_| {
                        (0..2)
                            .map(|_| rng.random_range(0..v as u32))
                            .collect::<Vec<u32>>()
                    })
                    .collect();
                let grid = TokenGrid::from_rows(&rows, v as u32).unwrap();
                let frames = rvq_decode(&grid, &books).unwrap();
                let grid2 = rvq_encode(frames.view(), &books).unwrap();
                assert_eq!(grid, grid2, "round trip failed: V={v} trial {trial}");
            }
        }
    }
}
