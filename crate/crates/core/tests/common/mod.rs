//! Scalar reference implementations and shared fixtures.
#![allow(dead_code)]

use deeperaser::model::{forward, ModelConfig};
use deeperaser::synth::{SceneGenerator, SynthConfig, Triplet};
use deeperaser::training::{loss_and_gradients, weighted_l1_loss, MaskMode, Supervision, TrainConfig, TrainSource};
use deeperaser::{Model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen::<f64>())
}

/// A perturbed copy of `base`: some pixels far off, some close, some equal.
pub fn perturbed(rng: &mut ChaCha8Rng, base: &Tensor<f64>) -> Tensor<f64> {
    let (c, h, w) = base.shape();
    let data = base
        .data()
        .iter()
        .map(|&v| match rng.gen_range(0..3) {
            0 => rng.gen::<f64>(),
            1 => (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0),
            _ => v,
        })
        .collect();
    Tensor::from_vec(c, h, w, data).unwrap()
}

// ---------------------------------------------------------------- metrics

fn gray(t: &Tensor<f64>, y: usize, x: usize) -> f64 {
    255.0 * (0.299 * t.get(0, y, x) + 0.587 * t.get(1, y, x) + 0.114 * t.get(2, y, x))
}

pub fn ref_mse(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (c, h, w) = a.shape();
    let mut s = 0.0;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let d = a.get(ch, y, x) - b.get(ch, y, x);
                s += d * d;
            }
        }
    }
    100.0 * s / (c * h * w) as f64
}

pub fn ref_psnr(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let m = ref_mse(a, b) / 100.0;
    if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    }
}

pub fn ref_age(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let (_, h, w) = a.shape();
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            s += (gray(a, y, x) - gray(b, y, x)).abs();
        }
    }
    s / (h * w) as f64
}

fn error_map(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<bool>> {
    let (_, h, w) = a.shape();
    (0..h)
        .map(|y| (0..w).map(|x| (gray(a, y, x) - gray(b, y, x)).abs() > 20.0).collect())
        .collect()
}

pub fn ref_peps(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let e = error_map(a, b);
    let n: usize = e.iter().map(|r| r.iter().filter(|&&v| v).count()).sum();
    n as f64 / (a.height() * a.width()) as f64
}

pub fn ref_pceps(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let e = error_map(a, b);
    let (h, w) = (a.height() as isize, a.width() as isize);
    let at = |y: isize, x: isize| y >= 0 && x >= 0 && y < h && x < w && e[y as usize][x as usize];
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if at(y, x) && at(y - 1, x) && at(y + 1, x) && at(y, x - 1) && at(y, x + 1) {
                n += 1;
            }
        }
    }
    n as f64 / (h * w) as f64
}

type Grid = Vec<Vec<f64>>;

fn ssim_terms(a: &Grid, b: &Grid, win: usize) -> (f64, f64) {
    let sigma = 1.5;
    let half = (win / 2) as f64;
    let mut g = vec![vec![0.0; win]; win];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - half, j as f64 - half);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let (h, w) = (a.len(), a[0].len());
    let (mut ssim, mut cs, mut n) = (0.0, 0.0, 0.0);
    for y0 in 0..=h - win {
        for x0 in 0..=w - win {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = g[i][j] / total;
                    ma += k * a[y0 + i][x0 + j];
                    mb += k * b[y0 + i][x0 + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..win {
                for j in 0..win {
                    let k = g[i][j] / total;
                    let (da, db) = (a[y0 + i][x0 + j] - ma, b[y0 + i][x0 + j] - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            let c = (2.0 * cov + c2) / (va + vb + c2);
            ssim += c * (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            cs += c;
            n += 1.0;
        }
    }
    (ssim / n, cs / n)
}

fn halve(a: &Grid) -> Grid {
    (0..a.len() / 2)
        .map(|y| {
            (0..a[0].len() / 2)
                .map(|x| 0.25 * (a[2 * y][2 * x] + a[2 * y][2 * x + 1] + a[2 * y + 1][2 * x] + a[2 * y + 1][2 * x + 1]))
                .collect()
        })
        .collect()
}

pub fn ref_mssim(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let base = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let (c, h, w) = a.shape();
    let side = h.min(w);
    let (scales, win) = if side < 11 {
        (1, if side % 2 == 0 { side - 1 } else { side })
    } else {
        let mut s = 1;
        while s < 5 && side >= 11 << s {
            s += 1;
        }
        (s, 11)
    };
    // canonical weights as published; truncated sets are renormalized
    let wsum: f64 = if scales == 5 { 1.0 } else { base[..scales].iter().sum() };
    let mut out = 0.0;
    for ch in 0..c {
        let grid = |t: &Tensor<f64>| -> Grid { (0..h).map(|y| (0..w).map(|x| 255.0 * t.get(ch, y, x)).collect()).collect() };
        let (mut ga, mut gb) = (grid(a), grid(b));
        let mut v = 1.0;
        for (s, wt) in base[..scales].iter().enumerate() {
            let (ssim, cs) = ssim_terms(&ga, &gb, win);
            let term = if s + 1 == scales { ssim } else { cs };
            v *= term.max(0.0).powf(wt / wsum);
            ga = halve(&ga);
            gb = halve(&gb);
        }
        out += v;
    }
    100.0 * out / c as f64
}

// ---------------------------------------------------------- recurrence

fn conv_ref(model: &Model<f64>, name: &str, input: &Tensor<f64>) -> Tensor<f64> {
    let p = model.params();
    let wt = p.get(p.find(&format!("{name}.weight")).expect("weight"));
    let bias = &p.get(p.find(&format!("{name}.bias")).expect("bias")).data;
    let (co, ci, k) = (wt.shape[0], wt.shape[1], wt.shape[2]);
    let (_, h, w) = input.shape();
    let r = (k / 2) as isize;
    Tensor::from_fn(co, h, w, |o, y, x| {
        let mut s = bias[o];
        for i in 0..ci {
            for ky in 0..k {
                for kx in 0..k {
                    let (yy, xx) = (y as isize + ky as isize - r, x as isize + kx as isize - r);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += wt.data[((o * ci + i) * k + ky) * k + kx] * input.get(i, yy as usize, xx as usize);
                    }
                }
            }
        }
        s
    })
}

fn stack(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let ca = a.channels();
    Tensor::from_fn(ca + b.channels(), a.height(), a.width(), |c, y, x| {
        if c < ca {
            a.get(c, y, x)
        } else {
            b.get(c - ca, y, x)
        }
    })
}

/// Gated recurrent update written pixel by pixel.
pub fn ref_gru(model: &Model<f64>, l: &Tensor<f64>, f: &Tensor<f64>) -> Tensor<f64> {
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let hx = stack(l, f);
    let z = conv_ref(model, "erasing.gru.update", &hx).map(sig);
    let r = conv_ref(model, "erasing.gru.reset", &hx).map(sig);
    let rl = r.zip_map(l, |a, b| a * b);
    let q = conv_ref(model, "erasing.gru.candidate", &stack(&rl, f)).map(f64::tanh);
    Tensor::from_fn(l.channels(), l.height(), l.width(), |c, y, x| {
        let zv = z.get(c, y, x);
        (1.0 - zv) * l.get(c, y, x) + zv * q.get(c, y, x)
    })
}

pub fn gru_config(d: usize) -> ModelConfig {
    ModelConfig {
        latent_channels: d,
        backbone_width: 4,
        num_residual_blocks: 1,
        head_hidden: 4,
        extractor_hidden: 4,
        extractor_out: 4,
        ..Default::default()
    }
}

pub fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// -------------------------------------------------------------- params

/// Parameter count of a network, computed layer by layer.
pub fn analytic_counts(c: &ModelConfig) -> (usize, usize) {
    let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
    let (d, w, k) = (c.latent_channels, c.backbone_width, c.kernel_size);
    let backbone = conv(4, w, k) + 2 * c.num_residual_blocks * conv(w, w, k) + 2 * conv(w, d, 1);
    let extractor = conv(3, c.extractor_hidden, k)
        + conv(c.extractor_hidden, c.extractor_out, k)
        + conv(c.extractor_out + 3 + d, d, 1);
    let gru = 3 * conv(2 * d, d, k);
    let head = conv(d, c.head_hidden, k) + conv(c.head_hidden, 3, k);
    (backbone + extractor + gru + head, backbone)
}

// ------------------------------------------------------------ gradients

pub struct GradCheck {
    pub samples: usize,
    pub worst: f64,
    pub worst_name: String,
}

/// Analytic vs central-difference gradients of the weighted loss at
/// `samples` random scalar parameters of an 8×8, D=8, K=2 model.
pub fn gradient_check(samples: usize, seed: u64) -> GradCheck {
    let cfg = ModelConfig {
        latent_channels: 8,
        backbone_width: 8,
        num_residual_blocks: 1,
        head_hidden: 8,
        extractor_hidden: 4,
        extractor_out: 5,
        iterations: 2,
        ..Default::default()
    };
    let k = 2;
    let lambda = 0.85;
    let model = Model::<f64>::init(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let image = Tensor::<f64>::from_fn(3, 8, 8, |_, _, _| r.gen_range(0.3..0.7));
    let mask = Tensor::<f64>::from_fn(1, 8, 8, |_, y, x| if (2..6).contains(&y) && (1..6).contains(&x) { 1.0 } else { 0.0 });
    let gt = Tensor::<f64>::from_fn(3, 8, 8, |_, _, _| if r.gen_bool(0.5) { r.gen_range(0.0..0.2) } else { r.gen_range(0.8..1.0) });
    let (_, grads) = loss_and_gradients(&model, &image, &mask, &gt, k, lambda, Supervision::AllIterations).unwrap();
    let loss = |m: &Model<f64>| weighted_l1_loss(&forward(m, &image, &mask, k).unwrap().predictions, &gt, lambda).unwrap().total;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = GradCheck { samples, worst: 0.0, worst_name: String::new() };
    for _ in 0..samples {
        let mut flat = r.gen_range(0..total);
        let mut pi = 0;
        while flat >= sizes[pi] {
            flat -= sizes[pi];
            pi += 1;
        }
        let shifted = |delta: f64| {
            let mut p = model.params().clone();
            p.iter_mut().nth(pi).unwrap().data[flat] += delta;
            loss(&model.clone().with_params(p).unwrap())
        };
        // Largest step whose one-sided slopes agree, i.e. no ReLU, clamp or
        // L1 kink within ±h. Smaller steps lose digits to cancellation.
        let f0 = shifted(0.0);
        let mut h = 1e-4;
        let numeric = loop {
            let (up, down) = (shifted(h), shifted(-h));
            let (fw, bw) = ((up - f0) / h, (f0 - down) / h);
            if (fw - bw).abs() <= 1e-3 * fw.abs().max(bw.abs()) + 1e-9 || h <= 1e-7 {
                break (up - down) / (2.0 * h);
            }
            h /= 10.0;
        };
        let analytic = grads[pi][flat];
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale };
        if rel >= out.worst {
            out.worst = rel;
            out.worst_name = format!("{}[{flat}]", model.params().iter().nth(pi).unwrap().name);
        }
    }
    out
}

// ------------------------------------------------------------ toy setup

pub const TOY_SCENES: usize = 16;
pub const TOY_STEPS: usize = 2000;

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        latent_channels: 16,
        backbone_width: 16,
        num_residual_blocks: 4,
        head_hidden: 16,
        iterations: 4,
        ..Default::default()
    }
}

pub fn toy_train_config() -> TrainConfig {
    TrainConfig {
        base_lr: 2e-3,
        epochs: 10_000,
        batch_size: 2,
        crop: 64,
        iterations: 4,
        mask_mode: MaskMode::All,
        max_steps: Some(TOY_STEPS),
        ..Default::default()
    }
}

pub fn toy_sources() -> Vec<TrainSource> {
    let mut gen = SceneGenerator::new(SynthConfig::default(), 1);
    (0..TOY_SCENES).map(|_| TrainSource::Scene(gen.next_scene())).collect()
}

pub fn toy_triplets(sources: &[TrainSource]) -> Vec<Triplet> {
    sources.iter().map(|s| s.draw(MaskMode::All, 0.0, 0)).collect()
}
