//! Synthetic data: correlated Gaussian pairs and a two-stream corpus of
//! spectrogram-like patches with a coherent side stream.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use mcc_tensor::io::{self, DType};
use mcc_tensor::{Rng, Tensor};

use crate::error::{Error, Result};
use crate::report::{read_csv, Csv};

/// Independent pairs `(X_k, Y_k)` of standard normals with correlation `ρ_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPairSpec {
    pub correlations: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

impl GaussianPairSpec {
    pub fn uniform(dim: usize, rho: f64, n: usize, seed: u64) -> Self {
        GaussianPairSpec {
            correlations: vec![rho; dim],
            n,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.correlations.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.correlations.is_empty() {
            return Err(Error::Config("gaussian pairs need at least one dimension".into()));
        }
        if let Some(r) = self.correlations.iter().find(|r| !(r.abs() < 1.0)) {
            return Err(Error::Domain(format!("correlation {r} must satisfy |rho| < 1")));
        }
        if self.n == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `n×d` samples `X`, `Y = ρX + √(1−ρ²)·ξ`.
pub fn sample_correlated_gaussians(spec: &GaussianPairSpec, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    spec.validate()?;
    let d = spec.dim();
    let mut x = Vec::with_capacity(spec.n * d);
    let mut y = Vec::with_capacity(spec.n * d);
    for _ in 0..spec.n {
        for &rho in &spec.correlations {
            let a = rng.normal();
            let xi = rng.normal();
            x.push(a);
            y.push(rho * a + (1.0 - rho * rho).sqrt() * xi);
        }
    }
    Ok((Tensor::new(&[spec.n, d], x)?, Tensor::new(&[spec.n, d], y)?))
}

fn check_patch(h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 {
        return Err(Error::Domain(format!("patches must be at least 8×8, got {h}×{w}")));
    }
    Ok(())
}

fn normalize_max(data: &mut [f64]) {
    let max = data.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        data.iter_mut().for_each(|x| *x /= max);
    }
}

/// Non-negative `[1×h×w]` patch (rows = frequency, columns = time) built
/// from a few drifting harmonic ridges with smooth onsets, scaled to unit max.
pub fn synth_clean_signal(rng: &mut Rng, h: usize, w: usize) -> Result<Tensor> {
    check_patch(h, w)?;
    let (hf, wf) = (h as f64, w as f64);
    let mut data = vec![0.0; h * w];
    let ridges = 2 + rng.below(2);
    for _ in 0..ridges {
        let f0 = rng.uniform_range(1.5, hf / 4.0);
        let drift = rng.uniform_range(0.0, 1.5);
        let period = rng.uniform_range(wf / 2.0, 2.0 * wf);
        let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
        let harmonics = 1 + rng.below(3);
        let gain = rng.uniform_range(0.5, 1.0);
        let onset = rng.uniform_range(-wf / 4.0, wf / 3.0);
        let offset = rng.uniform_range(2.0 * wf / 3.0, 1.25 * wf);
        for t in 0..w {
            let tf = t as f64;
            let f = f0 + drift * (std::f64::consts::TAU * tf / period + phase).sin();
            let env = gain / ((1.0 + (-(tf - onset) / 2.0).exp()) * (1.0 + (-(offset - tf) / 2.0).exp()));
            for j in 1..=harmonics {
                let centre = j as f64 * f;
                let amp = env * 0.7f64.powi(j as i32 - 1);
                for y in 0..h {
                    let z = (y as f64 - centre) / 0.7;
                    data[y * w + t] += amp * (-0.5 * z * z).exp();
                }
            }
        }
    }
    normalize_max(&mut data);
    Ok(Tensor::new(&[1, h, w], data)?)
}

/// Interference added to clean patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    /// `|N(0,1)|` per cell.
    White,
    /// White noise box-filtered over a 3×3 neighbourhood.
    Pink,
    /// A second, unrelated clean patch (a competing talker).
    Patterned,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::Patterned];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::Patterned => "patterned",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown noise kind {s:?}")))
    }
}

pub fn synth_noise(kind: NoiseKind, rng: &mut Rng, h: usize, w: usize) -> Result<Tensor> {
    check_patch(h, w)?;
    let white = |rng: &mut Rng| (0..h * w).map(|_| rng.normal().abs()).collect::<Vec<_>>();
    let data = match kind {
        NoiseKind::White => white(rng),
        NoiseKind::Pink => {
            let src = white(rng);
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let (mut s, mut n) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            s += src[yy * w + xx];
                            n += 1.0;
                        }
                    }
                    out[y * w + x] = s / n;
                }
            }
            out
        }
        NoiseKind::Patterned => return synth_clean_signal(rng, h, w),
    };
    Ok(Tensor::new(&[1, h, w], data)?)
}

fn power(t: &Tensor) -> f64 {
    t.data().iter().map(|x| x * x).sum::<f64>() / t.len() as f64
}

/// Noise gain `s` with `P_clean / (s²·P_noise) = 10^(snr/10)`.
pub fn snr_scale(clean: &Tensor, noise: &Tensor, snr_db: f64) -> Result<f64> {
    if clean.dims() != noise.dims() {
        return Err(Error::Tensor(mcc_tensor::TensorError::Shape {
            op: "mix_at_snr",
            lhs: clean.dims().to_vec(),
            rhs: noise.dims().to_vec(),
        }));
    }
    let (pc, pn) = (power(clean), power(noise));
    if pn <= 0.0 {
        return Err(Error::Domain("noise has zero power".into()));
    }
    if pc <= 0.0 {
        return Err(Error::Domain("clean signal has zero power; SNR undefined".into()));
    }
    Ok((pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt())
}

/// `clean + s·noise` at the requested SNR.
pub fn mix_at_snr(clean: &Tensor, noise: &Tensor, snr_db: f64) -> Result<Tensor> {
    let s = snr_scale(clean, noise, snr_db)?;
    Ok(clean.zip_map(noise, |c, n| c + s * n)?)
}

/// Side stream `V = tanh(2·avgpool₂(clean))` over the last two axes.
pub fn visual_stream_transform(clean: &Tensor) -> Result<Tensor> {
    let dims = clean.dims();
    if dims.len() < 2 || dims[dims.len() - 1] < 2 || dims[dims.len() - 2] < 2 {
        return Err(Error::Domain(format!("visual transform needs a 2-d patch, got {dims:?}")));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let (oh, ow) = (h / 2, w / 2);
    let planes = clean.len() / (h * w);
    let src = clean.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let at = |yy: usize, xx: usize| src[base + (2 * y + yy) * w + 2 * x + xx];
                let mean = (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0;
                out.push((2.0 * mean).tanh());
            }
        }
    }
    let mut out_dims = dims[..dims.len() - 2].to_vec();
    out_dims.extend([oh, ow]);
    Ok(Tensor::new(&out_dims, out)?)
}

/// Scalar standardisation applied to the noisy stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn fit(t: &Tensor) -> Self {
        let mean = t.mean();
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
        NormStats {
            mean,
            std: var.sqrt().max(1e-12),
        }
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        t.map(|x| (x - self.mean) / self.std)
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        t.map(|x| x * self.std + self.mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generation parameters for [`make_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub snr_grid: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    pub train_fraction: f64,
}

/// `−12, −9, …, +12` dB.
pub fn default_snr_grid() -> Vec<f64> {
    (-4..=4).map(|k| 3.0 * k as f64).collect()
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n: 1000,
            height: 16,
            width: 16,
            snr_grid: default_snr_grid(),
            noise_kinds: NoiseKind::ALL.to_vec(),
            train_fraction: 0.8,
        }
    }
}

/// Samples drawn from each split since construction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AccessCounts {
    pub train: usize,
    pub test: usize,
}

/// One mini-batch of aligned streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Clean target `Z`, `[n×1×h×w]`.
    pub clean: Tensor,
    /// Normalised noisy stream `X`, `[n×1×h×w]`.
    pub noisy: Tensor,
    /// Side stream `V`, `[n×1×h/2×w/2]`.
    pub visual: Tensor,
    pub snr: Vec<f64>,
}

/// Aligned clean, noisy and side streams with a fixed train/test split.
#[derive(Debug)]
pub struct TwoStreamCorpus {
    pub clean: Tensor,
    /// Normalised noisy stream.
    pub noisy: Tensor,
    pub visual: Tensor,
    pub snr: Vec<f64>,
    pub noise: Vec<NoiseKind>,
    pub norm: NormStats,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    train_reads: AtomicUsize,
    test_reads: AtomicUsize,
}

impl PartialEq for TwoStreamCorpus {
    fn eq(&self, other: &Self) -> bool {
        self.clean == other.clean
            && self.noisy == other.noisy
            && self.visual == other.visual
            && self.snr == other.snr
            && self.noise == other.noise
            && self.norm == other.norm
            && self.train == other.train
            && self.test == other.test
    }
}

pub fn make_corpus(cfg: &CorpusConfig, rng: &mut Rng) -> Result<TwoStreamCorpus> {
    if cfg.n < 10 {
        return Err(Error::Config(format!("corpus needs at least 10 samples, got {}", cfg.n)));
    }
    if cfg.snr_grid.is_empty() || cfg.noise_kinds.is_empty() {
        return Err(Error::Config("snr grid and noise kinds must be non-empty".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction {} outside (0, 1)", cfg.train_fraction)));
    }
    let (h, w) = (cfg.height, cfg.width);
    check_patch(h, w)?;
    let mut clean = Vec::with_capacity(cfg.n);
    let mut noisy = Vec::with_capacity(cfg.n);
    let mut snr = Vec::with_capacity(cfg.n);
    let mut noise = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut local = rng.fork(i as u64);
        let s = cfg.snr_grid[i % cfg.snr_grid.len()];
        let kind = cfg.noise_kinds[(i / cfg.snr_grid.len()) % cfg.noise_kinds.len()];
        let z = synth_clean_signal(&mut local, h, w)?;
        let nz = synth_noise(kind, &mut local, h, w)?;
        noisy.push(mix_at_snr(&z, &nz, s)?);
        clean.push(z);
        snr.push(s);
        noise.push(kind);
    }
    let order = rng.fork(u64::MAX - 1).permutation(cfg.n);
    let stack = |parts: &[Tensor]| -> Result<Tensor> {
        let picked: Vec<Tensor> = order.iter().map(|&i| parts[i].clone()).collect();
        let flat = Tensor::stack_rows(&picked)?;
        Ok(flat.reshape(&[cfg.n, 1, h, w])?)
    };
    let clean = stack(&clean)?;
    let raw_noisy = stack(&noisy)?;
    let snr = order.iter().map(|&i| snr[i]).collect();
    let noise = order.iter().map(|&i| noise[i]).collect();
    let norm = NormStats::fit(&raw_noisy);
    let visual = visual_stream_transform(&clean)?;
    let n_train = (cfg.n as f64 * cfg.train_fraction).floor() as usize;
    Ok(TwoStreamCorpus {
        noisy: norm.normalize(&raw_noisy),
        clean,
        visual,
        snr,
        noise,
        norm,
        train: (0..n_train).collect(),
        test: (n_train..cfg.n).collect(),
        train_reads: AtomicUsize::new(0),
        test_reads: AtomicUsize::new(0),
    })
}

fn select(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    Ok(t.select_rows(rows)?)
}

impl TwoStreamCorpus {
    pub fn len(&self) -> usize {
        self.snr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snr.is_empty()
    }

    /// `(h, w)` of the noisy and clean streams.
    pub fn patch_dims(&self) -> (usize, usize) {
        let d = self.clean.dims();
        (d[2], d[3])
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Rows `positions` of `split` (positions index into the split, not the
    /// corpus). Every sample read is counted against its split.
    pub fn batch(&self, split: Split, positions: &[usize]) -> Result<Batch> {
        let ids = self.split(split);
        let rows = positions
            .iter()
            .map(|&p| {
                ids.get(p)
                    .copied()
                    .ok_or_else(|| Error::Contract(format!("{} split has no row {p}", split.name())))
            })
            .collect::<Result<Vec<_>>>()?;
        let counter = match split {
            Split::Train => &self.train_reads,
            Split::Test => &self.test_reads,
        };
        counter.fetch_add(rows.len(), Ordering::Relaxed);
        Ok(Batch {
            clean: select(&self.clean, &rows)?,
            noisy: select(&self.noisy, &rows)?,
            visual: select(&self.visual, &rows)?,
            snr: rows.iter().map(|&r| self.snr[r]).collect(),
        })
    }

    /// The whole split as one batch.
    pub fn full(&self, split: Split) -> Result<Batch> {
        let positions: Vec<usize> = (0..self.split(split).len()).collect();
        self.batch(split, &positions)
    }

    pub fn access_counts(&self) -> AccessCounts {
        AccessCounts {
            train: self.train_reads.load(Ordering::Relaxed),
            test: self.test_reads.load(Ordering::Relaxed),
        }
    }

    pub fn reset_access_counts(&self) {
        self.train_reads.store(0, Ordering::Relaxed);
        self.test_reads.store(0, Ordering::Relaxed);
    }

    /// Noisy magnitudes of a batch in their original scale.
    pub fn raw_noisy(&self, batch: &Batch) -> Tensor {
        self.norm.denormalize(&batch.noisy)
    }

    /// Additive interference of a batch, `max(noisy − clean, 0)`.
    pub fn interference(&self, batch: &Batch) -> Result<Tensor> {
        let raw = self.raw_noisy(batch);
        Ok(raw.zip_map(&batch.clean, |n, c| (n - c).max(0.0))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, t: &Tensor| io::save(&dir.join(name), t, DType::F64);
        put("clean.mcct", &self.clean)?;
        put("noisy.mcct", &self.noisy)?;
        put("visual.mcct", &self.visual)?;
        let mut snr = Csv::new(&["index", "snr_db", "noise"]);
        for (i, (s, k)) in self.snr.iter().zip(&self.noise).enumerate() {
            snr.row(&[i.to_string(), format!("{s}"), k.name().to_string()]);
        }
        snr.write(&dir.join("snr.csv"))?;
        let mut norm = Csv::new(&["mean", "std"]);
        norm.row(&[format!("{:e}", self.norm.mean), format!("{:e}", self.norm.std)]);
        norm.write(&dir.join("norm.csv"))?;
        let mut split = Csv::new(&["index", "split"]);
        for (name, ids) in [("train", &self.train), ("test", &self.test)] {
            for i in ids {
                split.row(&[i.to_string(), name.to_string()]);
            }
        }
        split.write(&dir.join("split.csv"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let get = |name: &str| io::load(&dir.join(name));
        let clean = get("clean.mcct")?;
        let noisy = get("noisy.mcct")?;
        let visual = get("visual.mcct")?;
        let bad = |file: &str, what: String| Error::Config(format!("{}: {what}", dir.join(file).display()));
        let parse_f64 = |file: &str, s: &str| s.parse::<f64>().map_err(|e| bad(file, format!("{s:?}: {e}")));

        let (_, rows) = read_csv(&dir.join("snr.csv"))?;
        let mut snr = Vec::with_capacity(rows.len());
        let mut noise = Vec::with_capacity(rows.len());
        for row in &rows {
            if row.len() != 3 {
                return Err(bad("snr.csv", format!("expected 3 columns, got {}", row.len())));
            }
            snr.push(parse_f64("snr.csv", &row[1])?);
            noise.push(NoiseKind::parse(&row[2])?);
        }
        let (_, rows) = read_csv(&dir.join("norm.csv"))?;
        let row = rows.first().filter(|r| r.len() == 2).ok_or_else(|| bad("norm.csv", "missing stats".into()))?;
        let norm = NormStats {
            mean: parse_f64("norm.csv", &row[0])?,
            std: parse_f64("norm.csv", &row[1])?,
        };
        let (_, rows) = read_csv(&dir.join("split.csv"))?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for row in &rows {
            let i: usize = row
                .first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("split.csv", format!("bad row {row:?}")))?;
            match row.get(1).map(String::as_str) {
                Some("train") => train.push(i),
                Some("test") => test.push(i),
                _ => return Err(bad("split.csv", format!("bad row {row:?}"))),
            }
        }
        let n = snr.len();
        if clean.dims()[0] != n || noisy.dims() != clean.dims() || visual.dims()[0] != n {
            return Err(bad("clean.mcct", "stream lengths disagree".into()));
        }
        if train.iter().chain(&test).any(|&i| i >= n) || train.len() + test.len() != n {
            return Err(bad("split.csv", "split does not partition the corpus".into()));
        }
        Ok(TwoStreamCorpus {
            clean,
            noisy,
            visual,
            snr,
            noise,
            norm,
            train,
            test,
            train_reads: AtomicUsize::new(0),
            test_reads: AtomicUsize::new(0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_patches_are_rejected() {
        assert!(synth_clean_signal(&mut Rng::new(0), 4, 16).is_err());
        let cfg = CorpusConfig {
            n: 5,
            ..Default::default()
        };
        assert!(make_corpus(&cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn batch_positions_are_checked() {
        let cfg = CorpusConfig {
            n: 10,
            ..Default::default()
        };
        let c = make_corpus(&cfg, &mut Rng::new(0)).unwrap();
        assert!(c.batch(Split::Test, &[2]).is_err());
        assert!(c.batch(Split::Test, &[1]).is_ok());
    }
}
