//! Post-training analyses: correlations, firing histograms, relevance maps
//! and the silencing sweep.

use mcc_tensor::{Rng, Tape, Tensor};

use super::{evaluate_damaged, parallel_map, ExperimentConfig};
use crate::datagen::{Split, TwoStreamCorpus};
use crate::error::{Error, Result};
use crate::network::{pooled_filters, Network};
use crate::report::Csv;

pub const HISTOGRAM_BINS: usize = 20;

/// Counts of per-unit firing probabilities in 20 equal bins on `[0, 1]`;
/// a probability of exactly 1 lands in the top bin.
pub fn firing_histogram(probabilities: &Tensor) -> [usize; HISTOGRAM_BINS] {
    let mut bins = [0; HISTOGRAM_BINS];
    for &p in probabilities.data() {
        let b = ((p * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        bins[b] += 1;
    }
    bins
}

/// Pearson correlation between the columns of `[samples×units]`. A
/// constant column correlates 0 with every other and 1 with itself.
pub fn correlation_matrix(activations: &Tensor) -> Result<Tensor> {
    if activations.rank() != 2 {
        return Err(Error::Contract(format!(
            "activations must be samples×units, got {:?}",
            activations.dims()
        )));
    }
    let (n, u) = (activations.dims()[0], activations.dims()[1]);
    if n < 2 {
        return Err(Error::Contract(format!("correlation needs at least 2 samples, got {n}")));
    }
    let data = activations.data();
    let mut mean = vec![0.0; u];
    for row in data.chunks(u) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; u * u];
    for row in data.chunks(u) {
        for i in 0..u {
            let di = row[i] - mean[i];
            for j in i..u {
                cov[i * u + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let constant: Vec<bool> = (0..u)
        .map(|i| data.chunks(u).all(|row| row[i] == data[i]))
        .collect();
    let sd: Vec<f64> = (0..u)
        .map(|i| if constant[i] { 0.0 } else { cov[i * u + i].sqrt() })
        .collect();
    let mut out = vec![0.0; u * u];
    for i in 0..u {
        out[i * u + i] = 1.0;
        for j in i + 1..u {
            let r = if sd[i] > 0.0 && sd[j] > 0.0 {
                (cov[i * u + j] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out[i * u + j] = r;
            out[j * u + i] = r;
        }
    }
    Ok(Tensor::new(&[u, u], out)?)
}

/// Mean absolute off-diagonal entry; 0 for a single unit.
pub fn mean_abs_offdiag(corr: &Tensor) -> f64 {
    let u = corr.dims()[0];
    if u < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..u {
        for j in 0..u {
            if i != j {
                total += corr.data()[i * u + j].abs();
            }
        }
    }
    total / (u * (u - 1)) as f64
}

pub fn correlation_csv(corr: &Tensor) -> Csv {
    let u = corr.dims()[0];
    let names: Vec<String> = (0..u).map(|i| format!("u{i}")).collect();
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header);
    for row in corr.data().chunks(u) {
        csv.row(&row.iter().map(|x| x.to_string()).collect::<Vec<_>>());
    }
    csv
}

/// Per-filter spatial means of every conv layer on a split, both streams
/// side by side: one `[samples×(filters·streams)]` table per layer.
pub fn conv_layer_units(net: &Network, corpus: &TwoStreamCorpus, split: Split) -> Result<Vec<Tensor>> {
    let full = corpus.full(split)?;
    let mut tape = Tape::new();
    let audio = tape.constant(full.noisy);
    let visual = tape.constant(full.visual);
    let enc = net.encode(&mut tape, audio, visual, &mut None)?;
    enc.conv
        .iter()
        .map(|streams| {
            let parts = streams
                .iter()
                .map(|&v| pooled_filters(tape.value(v)))
                .collect::<Result<Vec<_>>>()?;
            concat_columns(&parts)
        })
        .collect()
}

fn concat_columns(parts: &[Tensor]) -> Result<Tensor> {
    let n = parts[0].dims()[0];
    let widths: Vec<usize> = parts.iter().map(|p| p.dims()[1]).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[i * w..(i + 1) * w]);
        }
    }
    Ok(Tensor::new(&[n, total], out)?)
}

/// Mean absolute activation per (time frame, filter) of a conv output
/// `[n×F×h×w]`; frames run along the last axis.
pub fn relevance_frames(activation: &Tensor) -> Result<Tensor> {
    let d = activation.dims();
    if d.len() != 4 {
        return Err(Error::Contract(format!("expected [n×F×h×w], got {d:?}")));
    }
    let (n, f, h, w) = (d[0], d[1], d[2], d[3]);
    let mut out = vec![0.0; w * f];
    for (k, plane) in activation.data().chunks(h * w).enumerate() {
        let filter = k % f;
        for row in plane.chunks(w) {
            for (t, x) in row.iter().enumerate() {
                out[t * f + filter] += x.abs();
            }
        }
    }
    let scale = 1.0 / (n * h) as f64;
    Ok(Tensor::new(&[w, f], out.into_iter().map(|x| x * scale).collect())?)
}

/// Absolute `[frames×filters]` map scaled so its largest entry is 1; an
/// all-zero map stays zero.
pub fn filter_relevance_map(frames: &Tensor) -> Result<Tensor> {
    if frames.rank() != 2 {
        return Err(Error::Contract(format!("expected frames×filters, got {:?}", frames.dims())));
    }
    let abs = frames.map(f64::abs);
    let max = abs.max();
    Ok(if max > 0.0 { abs.map(|x| x / max) } else { abs })
}

pub fn relevance_csv(map: &Tensor) -> Csv {
    let f = map.dims()[1];
    let mut names = vec!["frame".to_string()];
    names.extend((0..f).map(|i| format!("f{i}")));
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header);
    for (t, row) in map.data().chunks(f).enumerate() {
        let mut cells = vec![t.to_string()];
        cells.extend(row.iter().map(|x| x.to_string()));
        csv.row(&cells);
    }
    csv
}

/// Error statistics at one silencing probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ResiliencePoint {
    pub p: f64,
    pub mean: f64,
    pub std: f64,
    pub errors: Vec<f64>,
}

/// Test error under random silencing of conv units, `passes` full sweeps
/// of the test split per probability. `P = 0` is a single undamaged pass.
pub fn resilience_sweep(
    net: &Network,
    cfg: &ExperimentConfig,
    corpus: &TwoStreamCorpus,
    grid: &[f64],
    passes: usize,
    rng: &Rng,
) -> Result<Vec<ResiliencePoint>> {
    if let Some(p) = grid.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::Config(format!("silencing probability {p} outside [0, 1]")));
    }
    if passes == 0 {
        return Err(Error::Config("passes must be positive".into()));
    }
    parallel_map(grid, |i, &p| {
        let errors = if p == 0.0 {
            vec![evaluate_damaged(net, cfg, corpus, Split::Test, None)?.error()?]
        } else {
            let mut stream = rng.fork(i as u64);
            (0..passes)
                .map(|_| evaluate_damaged(net, cfg, corpus, Split::Test, Some((p, &mut stream)))?.error())
                .collect::<Result<Vec<_>>>()?
        };
        let k = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / k;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / k).sqrt();
        Ok(ResiliencePoint { p, mean, std, errors })
    })
    .into_iter()
    .collect()
}

pub fn resilience_csv(points: &[ResiliencePoint]) -> Csv {
    let mut csv = Csv::new(&["p", "mean_error", "std_error"]);
    for pt in points {
        csv.row(&[pt.p.to_string(), pt.mean.to_string(), pt.std.to_string()]);
    }
    csv
}

/// Largest drop `values[i] − values[j]` over `i < j`; 0 for a
/// non-decreasing series.
pub fn isotonic_violation(values: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for &v in values {
        peak = peak.max(v);
        worst = worst.max(peak - v);
    }
    worst
}

/// First update after which the trailing `window`-average of `series`
/// stays within `tol` of its final value. Updates count from 1.
pub fn plateau_update(series: &[f64], window: usize, tol: f64) -> Option<usize> {
    if window == 0 || series.len() < window {
        return None;
    }
    let mut avg = Vec::with_capacity(series.len() - window + 1);
    let mut sum: f64 = series[..window].iter().sum();
    avg.push(sum / window as f64);
    for t in window..series.len() {
        sum += series[t] - series[t - window];
        avg.push(sum / window as f64);
    }
    let last = *avg.last().expect("non-empty");
    let mut first = avg.len() - 1;
    while first > 0 && (avg[first - 1] - last).abs() <= tol {
        first -= 1;
    }
    Some(first + window)
}
