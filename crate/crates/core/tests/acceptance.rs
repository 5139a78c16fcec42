//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p deeperaser --test acceptance [-- <name filter>]`

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use deeperaser::eval::{evaluate_dataset, predict, Predictor, Protocol};
use deeperaser::io;
use deeperaser::metrics::{self, composite_non_text, ERROR_THRESHOLD};
use deeperaser::model::{count_parameters, forward, gru_update, ModelConfig, ParamScope};
use deeperaser::synth::{make_triplet, select_instances, SceneGenerator, SynthConfig, Triplet};
use deeperaser::training::{weighted_l1_loss, TrainSource, Trainer, Variant};
use deeperaser::{Model, Tensor};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

type Criterion = (&'static str, fn() -> (bool, String));

struct Suite {
    filter: Option<String>,
    failed: usize,
}

impl Suite {
    fn wants(&self, name: &str) -> bool {
        self.filter.as_deref().is_none_or(|f| name.contains(f))
    }

    fn report(&mut self, name: &str, started: Instant, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        let verdict = if ok { "PASS" } else { "FAIL" };
        println!("{verdict} {name}: {detail} [{:.1}s]", started.elapsed().as_secs_f64());
    }
}

fn parameter_budget() -> (bool, String) {
    let model = Model::<f32>::zeroed(ModelConfig::default()).unwrap();
    let total = count_parameters(&model, ParamScope::All);
    let backbone = count_parameters(&model, ParamScope::Backbone);
    let ok = (1_200_000..=1_600_000).contains(&total)
        && (750_000..=1_050_000).contains(&backbone)
        && analytic_counts(model.config()) == (total, backbone);
    (ok, format!("total {total} in [1.2M, 1.6M], backbone {backbone} in [0.75M, 1.05M]"))
}

fn gru_oracle() -> (bool, String) {
    let mut r = rng(21);
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let model = Model::<f64>::init(gru_config(4), seed).unwrap();
        let l = random_image(&mut r, 4, 5, 5).map(|v| 2.0 * v - 1.0);
        let f = random_image(&mut r, 4, 5, 5);
        worst = worst.max(max_abs_diff(&gru_update(&model, &l, &f).unwrap(), &ref_gru(&model, &l, &f)));
    }
    let zero = Model::<f64>::zeroed(gru_config(4)).unwrap();
    let l = random_image(&mut r, 4, 5, 5).map(|v| 2.0 * v - 1.0);
    let f = random_image(&mut r, 4, 5, 5);
    let halved = max_abs_diff(&gru_update(&zero, &l, &f).unwrap(), &l.map(|v| 0.5 * v));
    (
        worst < 1e-6 && halved < 1e-6,
        format!("max |gru - scalar loop| {worst:.2e}, zero weights |l_k - l_(k-1)/2| {halved:.2e}, tol 1e-6"),
    )
}

fn gradient_check_line() -> (bool, String) {
    let c = gradient_check(100, 7);
    (
        c.worst < 1e-4,
        format!("worst relative error {:.2e} over {} parameters ({}), tol 1e-4", c.worst, c.samples, c.worst_name),
    )
}

fn loss_arithmetic() -> (bool, String) {
    let gt = Tensor::<f64>::zeros(3, 4, 4);
    let preds: Vec<_> = [0.3, 0.2, 0.1].iter().map(|&d| Tensor::filled(3, 4, 4, d)).collect();
    let total = weighted_l1_loss(&preds, &gt, 0.85).unwrap().total;
    ((total - 0.48675).abs() < 1e-12, format!("K=3, lambda 0.85, distances (0.3, 0.2, 0.1) -> {total}"))
}

fn metric_oracles() -> (bool, String) {
    let mut r = rng(22);
    let mut worst_scalar: f64 = 0.0;
    let mut worst_mssim: f64 = 0.0;
    let mut ordered = true;
    let close = |got: f64, want: f64| {
        if got.is_infinite() && got == want {
            0.0
        } else {
            (got - want).abs()
        }
    };
    for _ in 0..100 {
        let a = random_image(&mut r, 3, 5, 5);
        let b = perturbed(&mut r, &a);
        let peps = metrics::peps(&b, &a, ERROR_THRESHOLD).unwrap();
        let pceps = metrics::pceps(&b, &a, ERROR_THRESHOLD).unwrap();
        ordered &= pceps <= peps;
        for d in [
            close(metrics::psnr(&b, &a).unwrap(), ref_psnr(&b, &a)),
            close(metrics::mse(&b, &a).unwrap(), ref_mse(&b, &a)),
            close(metrics::age(&b, &a).unwrap(), ref_age(&b, &a)),
            close(peps, ref_peps(&b, &a)),
            close(pceps, ref_pceps(&b, &a)),
        ] {
            worst_scalar = worst_scalar.max(d);
        }
        worst_mssim = worst_mssim.max(close(metrics::mssim(&b, &a).unwrap(), ref_mssim(&b, &a)));
    }
    for _ in 0..20 {
        let a = random_image(&mut r, 3, 192, 192);
        let b = perturbed(&mut r, &a);
        ordered &= metrics::pceps(&b, &a, ERROR_THRESHOLD).unwrap() <= metrics::peps(&b, &a, ERROR_THRESHOLD).unwrap();
        worst_mssim = worst_mssim.max(close(metrics::mssim(&b, &a).unwrap(), ref_mssim(&b, &a)));
    }
    (
        worst_scalar <= 1e-9 && worst_mssim <= 1e-6 && ordered,
        format!(
            "PSNR/MSE/AGE/pEPs/pCEPS max error {worst_scalar:.2e} (tol 1e-9), MSSIM {worst_mssim:.2e} (tol 1e-6), pceps <= peps: {ordered}"
        ),
    )
}

fn mask_statistics() -> (bool, String) {
    let mut gen = SceneGenerator::new(SynthConfig::default(), 23);
    let (mut seen, mut kept, mut seed) = (0usize, 0usize, 0u64);
    while seen < 10_000 {
        let scene = gen.next_scene();
        seen += scene.instances.len();
        kept += select_instances(&scene.instances, 0.4, seed).len();
        seed += 1;
    }
    let rate = kept as f64 / seen as f64;
    ((0.58..=0.62).contains(&rate), format!("selection rate {rate:.4} over {seen} instances at alpha 0.4"))
}

/// Composited output of `model` on part-mask triplets: every non-mask byte
/// must equal the input and the non-mask AGE must be exactly zero.
fn compositing(model: &Model<f32>, iterations: usize) -> (bool, String) {
    let mut gen = SceneGenerator::new(SynthConfig::default(), 24);
    let triplets: Vec<Triplet> = (0..16).map(|i| make_triplet(&gen.next_scene(), 0.4, i)).collect();
    let predictor = Predictor::Model { model, iterations };
    let (mut outside, mut differing, mut age_sum) = (0usize, 0usize, 0.0f64);
    for t in &triplets {
        let out = composite_non_text(&predict(&predictor, t).unwrap(), &t.image, &t.mask).unwrap();
        let (got, input) = (io::tensor_to_rgb(&out), io::tensor_to_rgb(&t.image));
        let (g_out, g_in) = (metrics::grayscale(&out), metrics::grayscale(&t.image));
        for (i, (p, q)) in got.pixels().zip(input.pixels()).enumerate() {
            if t.mask.data()[i] == 0.0 {
                outside += 1;
                differing += (p != q) as usize;
                age_sum += (g_out[i] - g_in[i]).abs();
            }
        }
    }
    let age = age_sum / outside.max(1) as f64;
    (
        outside > 0 && differing == 0 && age == 0.0,
        format!("{outside} non-mask pixels over 16 part-mask triplets, {differing} differ, non-mask AGE {age}"),
    )
}

fn mean_psnr_per_iteration(model: &Model<f32>, data: &[Triplet], iterations: usize) -> Vec<f64> {
    let mut sums = vec![0.0; iterations];
    for t in data {
        let out = forward(model, &t.image, &t.mask, iterations).unwrap();
        for (s, p) in sums.iter_mut().zip(&out.predictions) {
            *s += metrics::psnr(&io::round_trip_8bit(p), &t.gt).unwrap().min(metrics::PSNR_CAP_DB);
        }
    }
    sums.iter().map(|s| s / data.len() as f64).collect()
}

fn train_toy(variant: Variant, sources: &[TrainSource]) -> Model<f32> {
    let (tcfg, mcfg) = variant.apply(&toy_train_config(), &toy_model_config());
    let model = Model::<f32>::init(mcfg, tcfg.seed).unwrap();
    let mut trainer = Trainer::new(model, tcfg, sources.len()).unwrap();
    trainer.fit(sources, |_| {}).unwrap();
    trainer.model
}

fn toy_psnr(model: &Model<f32>, data: &[Triplet]) -> f64 {
    let iterations = model.config().iterations;
    evaluate_dataset(&Predictor::Model { model, iterations }, data, Protocol::Raw).unwrap().psnr
}

fn main() -> ExitCode {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut suite = Suite { filter, failed: 0 };

    let quick: [Criterion; 6] = [
        ("parameter_budget", parameter_budget),
        ("gru_oracle", gru_oracle),
        ("gradient_check", gradient_check_line),
        ("loss_arithmetic", loss_arithmetic),
        ("metric_oracles", metric_oracles),
        ("mask_statistics", mask_statistics),
    ];
    for (name, f) in quick {
        if suite.wants(name) {
            let t = Instant::now();
            let (ok, detail) = f();
            suite.report(name, t, ok, detail);
        }
    }

    let trained = ["overfit", "iteration_trend", "ablation", "compositing"];
    if trained.iter().any(|n| suite.wants(n)) {
        let sources = toy_sources();
        let data = toy_triplets(&sources);
        let k = toy_train_config().iterations;

        let t = Instant::now();
        let full = train_toy(Variant::Full, &sources);
        let full_psnr = toy_psnr(&full, &data);
        let identity: f64 = data.iter().map(|d| metrics::psnr(&d.image, &d.gt).unwrap()).sum::<f64>() / data.len() as f64;
        if suite.wants("overfit") {
            suite.report(
                "overfit",
                t,
                full_psnr >= 25.0,
                format!(
                    "{TOY_SCENES} triplets, K={k}, {TOY_STEPS} steps: mean PSNR {full_psnr:.2} dB (need >= 25, input vs target {identity:.2} dB)"
                ),
            );
        }

        if suite.wants("iteration_trend") {
            let t = Instant::now();
            let per_k = mean_psnr_per_iteration(&full, &data, k);
            let long = mean_psnr_per_iteration(&full, &data, 4 * k);
            let monotone = per_k.windows(2).all(|w| w[1] >= w[0] - 0.1);
            let drift = long[4 * k - 1] - per_k[k - 1];
            let shown: Vec<String> = per_k.iter().map(|v| format!("{v:.2}")).collect();
            suite.report(
                "iteration_trend",
                t,
                monotone && drift.abs() < 0.5,
                format!(
                    "PSNR(I_k) = [{}] non-decreasing within 0.1 dB: {monotone}; K={} gives {:.2} dB, change {drift:+.3} dB (tol 0.5)",
                    shown.join(", "),
                    4 * k,
                    long[4 * k - 1]
                ),
            );
        }

        if suite.wants("compositing") {
            let t = Instant::now();
            let (ok, detail) = compositing(&full, k);
            suite.report("compositing", t, ok, detail);
        }

        if suite.wants("ablation") {
            let t = Instant::now();
            let no_module = toy_psnr(&train_toy(Variant::NoErasingModule, &sources), &data);
            let no_prev = toy_psnr(&train_toy(Variant::NoPrevImage, &sources), &data);
            suite.report(
                "ablation",
                t,
                full_psnr - no_module >= 1.0 && full_psnr - no_prev >= 1.0,
                format!(
                    "full {full_psnr:.2} dB vs no_erasing_module {no_module:.2} ({:+.2}), no_prev_image {no_prev:.2} ({:+.2}); need >= +1 dB each",
                    full_psnr - no_module,
                    full_psnr - no_prev
                ),
            );
        }
    }

    if suite.failed > 0 {
        println!("{} criteria failed", suite.failed);
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
