//! Deterministic toy-scale training.
//!
//! A seeded synthetic dataset of colored geometric primitives stands in
//! for real image data, and a plain momentum-SGD loop runs the
//! convergence-oriented comparisons as directional smoke tests. Everything
//! is bit-reproducible for a fixed (graph, dataset, config) triple.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::autodiff::{backward, forward, init_params, LossMode, Params, Value};
use crate::graph::CompGraph;
use crate::zoo::{append_classifier, TransformError};

pub const IMAGE_SIZE: usize = 32;

/// Seeded synthetic classification dataset of shape `(n, 3, 32, 32)`.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub images: Value,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

/// Render class-conditional colored primitives at randomized positions and
/// scales. Consecutive class pairs share a hue and differ only by shape
/// (disk vs. ring), so mean color separates pairs but telling classes
/// apart needs spatial features. Labels are assigned round-robin so
/// classes stay balanced within one sample.
pub fn generate(seed: u64, n: usize, k: usize) -> SyntheticDataset {
    assert!(k >= 2 && n >= k, "need n >= k >= 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Value::zeros([n, 3, IMAGE_SIZE, IMAGE_SIZE]);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        // faint background noise
        for c in 0..3 {
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    images.set(i, c, y, x, rng.gen_range(0.0..0.1));
                }
            }
        }
        let color = class_color(class / 2, k.div_ceil(2));
        let cx = rng.gen_range(10..IMAGE_SIZE - 10) as f64;
        let cy = rng.gen_range(10..IMAGE_SIZE - 10) as f64;
        let r = rng.gen_range(5.0..9.0);
        let shade = rng.gen_range(0.8..1.0);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d2 = dx * dx + dy * dy;
                let inside = if class % 2 == 0 {
                    d2 <= r * r
                } else {
                    d2 <= r * r && d2 >= (r * 0.55) * (r * 0.55)
                };
                if inside {
                    for c in 0..3 {
                        images.set(i, c, y, x, color[c] * shade);
                    }
                }
            }
        }
    }
    SyntheticDataset { images, labels, classes: k, seed }
}

/// Evenly spaced hues, full saturation.
fn class_color(class: usize, k: usize) -> [f64; 3] {
    let h = class as f64 / k as f64 * 6.0;
    let f = h - h.floor();
    match h as usize % 6 {
        0 => [1.0, f, 0.0],
        1 => [1.0 - f, 1.0, 0.0],
        2 => [0.0, 1.0, f],
        3 => [0.0, 1.0 - f, 1.0],
        4 => [f, 0.0, 1.0],
        _ => [1.0, 0.0, 1.0 - f],
    }
}

/// Plain gradient descent with momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 5, batch_size: 16, learning_rate: 0.05, momentum: 0.9, seed: 1 }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

/// Training result. Divergence (non-finite loss) is an outcome, not a
/// crash: the curve stops at the diverged epoch.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub curve: Vec<EpochStat>,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub diverged: bool,
}

impl TrainOutcome {
    /// CSV with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc\n");
        for s in &self.curve {
            out.push_str(&format!("{},{},{}\n", s.epoch, s.train_loss, s.val_acc));
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Transform(#[from] TransformError),
    #[error("{0}")]
    Exec(#[from] crate::autodiff::ExecError),
    #[error("dataset is empty")]
    EmptyDataset,
}

/// Train on the first 80% of the dataset, evaluate accuracy on the rest.
/// The graph gets a classifier head inserted when it does not already end
/// in one of the right width.
pub fn train(
    graph: &CompGraph,
    dataset: &SyntheticDataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if dataset.labels.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let g = append_classifier(graph, dataset.classes)?;
    let mut params = init_params(&g, config.seed);
    let mut velocity: Params = params.clone();
    for (_, v) in velocity.iter_mut() {
        v.fill(0.0);
    }

    let n = dataset.labels.len();
    let split = (n * 4) / 5;
    let split = split.max(1).min(n);
    let mut curve = Vec::new();
    let mut diverged = false;

    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut at = 0;
        while at < split {
            let hi = (at + config.batch_size).min(split);
            let images = dataset.images.slice_batch(at, hi);
            let labels = dataset.labels[at..hi].to_vec();
            let pass = forward(&g, &params, &images, &LossMode::CrossEntropy(labels))?;
            if !pass.loss.is_finite() {
                diverged = true;
                break;
            }
            epoch_loss += pass.loss;
            batches += 1;
            let grads = backward(&g, &params, &pass);
            for (&id, gw) in &grads {
                let v = velocity.get_mut(id).expect("velocity mirrors params");
                let w = params.get_mut(id).expect("trained node has params");
                for i in 0..w.len() {
                    v[i] = config.momentum * v[i] + gw[i];
                    w[i] -= config.learning_rate * v[i];
                }
            }
            at = hi;
        }
        let train_loss = if batches > 0 { epoch_loss / batches as f64 } else { f64::NAN };
        let val_acc = if split < n {
            accuracy(&g, &params, dataset, split, n)?
        } else {
            f64::NAN
        };
        curve.push(EpochStat { epoch, train_loss, val_acc });
        if diverged {
            break;
        }
    }

    let last = curve.last();
    Ok(TrainOutcome {
        final_accuracy: last.map_or(0.0, |s| s.val_acc),
        final_loss: last.map_or(f64::NAN, |s| s.train_loss),
        curve,
        diverged,
    })
}

fn accuracy(
    g: &CompGraph,
    params: &Params,
    dataset: &SyntheticDataset,
    lo: usize,
    hi: usize,
) -> Result<f64, TrainError> {
    let mut correct = 0usize;
    let mut at = lo;
    while at < hi {
        let end = (at + 32).min(hi);
        let images = dataset.images.slice_batch(at, end);
        let pass = forward(g, params, &images, &LossMode::MeanActivation)?;
        let out = &pass.output;
        for b in 0..(end - at) {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for c in 0..out.shape[1] {
                let v = out.get(b, c, 0, 0);
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            if best == dataset.labels[at + b] {
                correct += 1;
            }
        }
        at = end;
    }
    Ok(correct as f64 / (hi - lo) as f64)
}

/// Per-run experiment manifest.
pub fn experiment_manifest(
    spec_text: &str,
    config: &TrainConfig,
    graph: &CompGraph,
) -> serde_json::Value {
    json!({
        "spec": spec_text,
        "config": {
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "learning_rate": config.learning_rate,
            "momentum": config.momentum,
            "seed": config.seed,
        },
        "seed": config.seed,
        "graph_hash": graph.canonical_hash(),
    })
}

/// Load 32x32 binary P6 PPM images from a directory, one class per
/// subdirectory in sorted order. A convenience hook for swapping in
/// external data; the synthetic generator remains the tested path.
pub fn load_image_folder(root: &std::path::Path) -> std::io::Result<SyntheticDataset> {
    let mut class_dirs: Vec<std::path::PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
            .collect();
        files.sort();
        for f in files {
            rows.push((read_ppm(&f)?, class));
        }
    }
    let classes = class_dirs.len().max(2);
    let n = rows.len();
    let mut images = Value::zeros([n, 3, IMAGE_SIZE, IMAGE_SIZE]);
    let mut labels = Vec::with_capacity(n);
    for (i, (pixels, class)) in rows.into_iter().enumerate() {
        let base = i * 3 * IMAGE_SIZE * IMAGE_SIZE;
        images.data[base..base + pixels.len()].copy_from_slice(&pixels);
        labels.push(class);
    }
    Ok(SyntheticDataset { images, labels, classes, seed: 0 })
}

/// Minimal binary P6 reader; expects exactly 32x32, maxval 255.
fn read_ppm(path: &std::path::Path) -> std::io::Result<Vec<f64>> {
    let bytes = std::fs::read(path)?;
    let err = |m: &str| std::io::Error::other(format!("{}: {m}", path.display()));
    let mut fields = Vec::new();
    let mut at = 0usize;
    while fields.len() < 4 && at < bytes.len() {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..at]).map_err(|_| err("bad header"))?);
    }
    if fields.len() != 4 || fields[0] != "P6" {
        return Err(err("not a binary P6 ppm"));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    if (w, h) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(err("expected 32x32"));
    }
    at += 1; // single whitespace after maxval
    let pixels = &bytes[at..];
    if pixels.len() < 3 * w * h {
        return Err(err("truncated pixel data"));
    }
    // interleaved RGB to planar
    let mut out = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            out[c * w * h + i] = pixels[i * 3 + c] as f64 / 255.0;
        }
    }
    Ok(out)
}
