//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 after printing the summary; set `ACCEPTANCE_STRICT=1` to exit 1
//! when any criterion fails.

mod common;

use std::time::Instant;

use plainmatte::backbone::{
    attention, backbone_forward, backbone_forward_planes, init_from_pretrained, plain_vit_specs, AttentionMode, TokenGrid,
};
use plainmatte::config::{AttentionKind, BackboneConfig, ModelConfig, NeckKind};
use plainmatte::cost::{attention_memory, global_ratio, model_flops, DecoderKind};
use plainmatte::data::synth::synth_samples;
use plainmatte::data::{trimap_with_kernels, AugmentConfig, MattingSample};
use plainmatte::inference::{grid_global_attention, grid_partition, grid_unpartition};
use plainmatte::losses::{gradient_penalty_grad, laplacian_loss_grad, separate_l1_grad};
use plainmatte::metrics::{evaluate, RegionMode};
use plainmatte::model::Model;
use plainmatte::params::ParamStore;
use plainmatte::plane::{seeded_rng, MattingInput, Plane};
use plainmatte::trainer::{evaluate_model, grad_check, LabeledInput, LrSchedule, TrainOptions, Trainer};
use rand::Rng;

const RES: (usize, usize) = (2048, 2048);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn vit_s(globals: usize, neck: NeckKind) -> ModelConfig {
    let mut cfg = ModelConfig::vit_s();
    cfg.backbone.global_blocks = Some(globals);
    cfg.backbone.neck_kind = neck;
    cfg
}

fn cost_ratios() -> Outcome {
    let start = Instant::now();
    let targets = [(0, 0.26), (2, 0.38), (4, 0.50), (8, 0.63)];
    let mut ok = true;
    let mut parts = Vec::new();
    for (g, want) in targets {
        let r = global_ratio(&vit_s(g, NeckKind::None), RES, AttentionMode::Normal).unwrap();
        let hit = (r - want).abs() <= 0.08;
        ok &= hit;
        parts.push(format!("g={g} {r:.3} (want {want:.2}±0.08{})", if hit { "" } else { " MISS" }));
    }
    let flops: Vec<u64> = (0..=12)
        .map(|g| model_flops(&vit_s(g, NeckKind::None), DecoderKind::DetailCapture, RES, AttentionMode::Normal).unwrap().flops)
        .collect();
    let monotone = flops.windows(2).all(|w| w[0] < w[1]);
    let secs = start.elapsed().as_secs_f64();
    outcome(ok && monotone && secs < 1.0, format!("{}; monotone {monotone}; {secs:.3}s", parts.join(", ")))
}

fn neck_overhead() -> Outcome {
    let with = model_flops(&vit_s(4, NeckKind::Residual), DecoderKind::DetailCapture, RES, AttentionMode::Normal).unwrap();
    let without = model_flops(&vit_s(4, NeckKind::None), DecoderKind::DetailCapture, RES, AttentionMode::Normal).unwrap();
    let ratio = with.flops as f64 / without.flops as f64;
    let delta = (with.params - without.params) as f64 / 1e6;
    outcome(ratio <= 1.05 && (delta - 1.9).abs() <= 0.3, format!("flops ratio {ratio:.4} (<= 1.05), param delta {delta:.3}M (1.9±0.3)"))
}

fn dcm_vs_sfp() -> Outcome {
    let cfg = ModelConfig::vit_s();
    let dcm = model_flops(&cfg, DecoderKind::DetailCapture, RES, AttentionMode::Normal).unwrap();
    let sfp = model_flops(&cfg, DecoderKind::SimpleFeaturePyramid, RES, AttentionMode::Normal).unwrap();
    let ratio = dcm.flops_of("decoder") as f64 / sfp.flops_of("decoder") as f64;
    let whole = dcm.flops as f64 / sfp.flops as f64;
    outcome(ratio <= 0.40, format!("decoder flops ratio {ratio:.3} (<= 0.40); whole model {whole:.3}, info only"))
}

fn grid_memory() -> Outcome {
    let bb = BackboneConfig::vit_s();
    let grid = (RES.0 / bb.patch_size, RES.1 / bb.patch_size);
    let n = attention_memory(grid, bb.embed_dim, bb.num_heads, AttentionMode::Normal);
    let g = attention_memory(grid, bb.embed_dim, bb.num_heads, AttentionMode::GridSample);
    let score_ratio = g.score_bytes as f64 / n.score_bytes as f64;
    let cfg = ModelConfig::vit_s();
    let normal = model_flops(&cfg, DecoderKind::DetailCapture, RES, AttentionMode::Normal).unwrap();
    let gridded = model_flops(&cfg, DecoderKind::DetailCapture, RES, AttentionMode::GridSample).unwrap();
    let reduction = 1.0 - gridded.peak_activation_bytes as f64 / normal.peak_activation_bytes as f64;
    outcome(
        4 * g.score_bytes == n.score_bytes && reduction >= 0.5,
        format!(
            "score ratio {score_ratio} (exactly 0.25); activations {:.2} GB -> {:.2} GB, reduction {:.1}% (>= 50%)",
            normal.peak_activation_bytes as f64 / 1e9,
            gridded.peak_activation_bytes as f64 / 1e9,
            100.0 * reduction
        ),
    )
}

fn parameter_budget() -> Outcome {
    let r = model_flops(&ModelConfig::vit_s(), DecoderKind::DetailCapture, (224, 224), AttentionMode::Normal).unwrap();
    let total = r.params as f64 / 1e6;
    let decoder = r.params_of("decoder") as f64 / 1e6;
    let share = decoder / total;
    let instantiated = Model::<f32>::init(ModelConfig::vit_s(), 0).unwrap().num_params() as u64;
    outcome(
        (total - 25.8).abs() <= 2.58 && decoder < 3.0 && (0.06..=0.12).contains(&share) && instantiated == r.params,
        format!("total {total:.2}M (25.8±10%), decoder {decoder:.3}M (< 3M), share {:.1}% ([6,12]%), instantiated == modeled {}", 100.0 * share, instantiated == r.params),
    )
}

fn fd_rel_error(f: impl Fn(&Plane<f64>) -> f64, analytic: &[f64], x: &Plane<f64>) -> f64 {
    let h = 1e-6;
    let floor = 1e-3 * analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut worst: f64 = 0.0;
    for i in 0..x.data().len() {
        let shift = |d: f64| {
            let mut v = x.data().to_vec();
            v[i] += d;
            Plane::new(1, x.height(), x.width(), v).unwrap()
        };
        let n = (f(&shift(h)) - f(&shift(-h))) / (2.0 * h);
        worst = worst.max((analytic[i] - n).abs() / analytic[i].abs().max(n.abs()).max(floor));
    }
    worst
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded_rng(21);
    let plane = |rng: &mut plainmatte::plane::SeededRng| Plane::new(1, 16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let (pred, gt) = (plane(&mut rng), plane(&mut rng));
    let tri = Plane::new(1, 16, 16, (0..256).map(|_| [0.0, 0.5, 1.0][rng.gen_range(0..3)]).collect()).unwrap();
    let l1 = fd_rel_error(|p| separate_l1_grad(p, &gt, &tri).unwrap().0, &separate_l1_grad(&pred, &gt, &tri).unwrap().1, &pred);
    let lap = fd_rel_error(|p| laplacian_loss_grad(p, &gt).unwrap().0, &laplacian_loss_grad(&pred, &gt).unwrap().1, &pred);
    let gp = fd_rel_error(|p| gradient_penalty_grad(p, &gt).unwrap().0, &gradient_penalty_grad(&pred, &gt).unwrap().1, &pred);

    let mut model = Model::<f64>::init(ModelConfig::tiny(), 2).unwrap();
    model.params.perturb(&mut seeded_rng(5), 0.05);
    let s = &synth_samples(1, 16, 16, 3)[0];
    let sample = LabeledInput {
        input: MattingInput::new(s.composite().unwrap(), trimap_with_kernels(&s.alpha, 3, 3)).unwrap(),
        alpha: s.alpha.clone(),
    }
    .cast::<f64>();
    let report = grad_check(&model, &sample, 256, 11).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        l1 < 1e-4 && lap < 1e-4 && gp < 1e-4 && report.max_rel_error < 1e-3 && secs < 120.0,
        format!(
            "l1 {l1:.1e}, laplacian {lap:.1e}, gradient penalty {gp:.1e} (< 1e-4); model {:.1e} over {} scalars, worst {}[{}] (< 1e-3); {secs:.1}s",
            report.max_rel_error, report.checked, report.worst_param, report.worst_index
        ),
    )
}

fn token_grid(gh: usize, gw: usize, d: usize, seed: u64) -> TokenGrid<f32> {
    let mut rng = seeded_rng(seed);
    TokenGrid::new(gh, gw, d, (0..gh * gw * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn attention_equivalences() -> Outcome {
    let mut model = Model::<f32>::init(ModelConfig::tiny(), 6).unwrap();
    model.params.perturb(&mut seeded_rng(7), 0.2);
    let store = &model.params;
    let d = model.config.backbone.embed_dim;
    let t = token_grid(4, 4, d, 1);
    let window = attention(&t, AttentionKind::Window(4), store, 0, 2).unwrap();
    let global = attention(&t, AttentionKind::Global, store, 0, 2).unwrap();
    let w_err = window.max_abs_diff(&global);

    let row: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
    let uniform = TokenGrid::new(8, 6, d, row.repeat(48)).unwrap();
    let g_err = grid_global_attention(&uniform, store, 1, 2).unwrap().max_abs_diff(&attention(&uniform, AttentionKind::Global, store, 1, 2).unwrap());

    let mut exact = true;
    for (k, (gh, gw)) in [(8, 8), (5, 7), (1, 1), (6, 3), (2, 9)].into_iter().enumerate() {
        let t = token_grid(gh, gw, 5, k as u64);
        exact &= grid_unpartition(&grid_partition(&t), (gh, gw)) == t;
    }
    outcome(
        w_err < 1e-5 && g_err < 1e-6 && exact,
        format!("window(k=grid) vs global {w_err:.1e} (< 1e-5); grid vs global on uniform tokens {g_err:.1e} (< 1e-6); partition round trip exact {exact}"),
    )
}

fn pretrained_mapping() -> Outcome {
    let cfg4 = BackboneConfig { neck_kind: NeckKind::None, ..BackboneConfig::tiny() };
    let cfg3 = BackboneConfig { in_channels: 3, ..cfg4.clone() };
    let pretrained = ParamStore::<f32>::initialize(&plain_vit_specs(&cfg4), &mut seeded_rng(12));
    let adapted = init_from_pretrained(&pretrained, &cfg4, 13).unwrap();
    let mut rng = seeded_rng(14);
    let img = Plane::new(3, 32, 48, (0..3 * 32 * 48).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap();
    let tri = Plane::new(1, 32, 48, (0..32 * 48).map(|_| [0.0, 0.5, 1.0][rng.gen_range(0..3)]).collect()).unwrap();
    let plain = backbone_forward_planes(&img, &pretrained, &cfg3, AttentionMode::Normal).unwrap();
    let ours = backbone_forward(&MattingInput::new(img, tri).unwrap(), &adapted, &cfg4).unwrap();
    let err = plain.data().iter().zip(ours.data()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
    outcome(err < 1e-5, format!("max abs err {err:.2e} (< 1e-5) with a random trimap"))
}

fn metric_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for seed in 0..1000u64 {
        let mut rng = seeded_rng(1_000 + seed);
        let (h, w) = (rng.gen_range(3..16), rng.gen_range(3..16));
        let gt = common::random_alpha(&mut rng, h, w);
        let pred: Vec<f64> = gt.iter().map(|&a| (a + rng.gen_range(-0.5..0.5)).clamp(0.0, 1.0)).collect();
        let tri = common::trimap(&gt, h, w, rng.gen_range(1..5), rng.gen_range(1..5));
        let p = |v: &[f64]| Plane::new(1, h, w, v.to_vec()).unwrap();
        for mode in [RegionMode::UnknownOnly, RegionMode::WholeImage] {
            let r = evaluate(&p(&pred), &p(&gt), &p(&tri), mode).unwrap();
            let mask: Vec<bool> = match mode {
                RegionMode::UnknownOnly => tri.iter().map(|&t| t == 0.5).collect(),
                RegionMode::WholeImage => vec![true; h * w],
            };
            for (a, b) in [
                (r.sad, common::sad(&pred, &gt, &mask)),
                (r.mse, common::mse(&pred, &gt, &mask)),
                (r.grad, common::grad(&pred, &gt, &mask, h, w)),
                (r.conn, common::conn(&pred, &gt, &mask, h, w)),
            ] {
                worst = worst.max(common::rel_err(a, b));
            }
            count += 1;
        }
    }
    outcome(worst < 1e-5, format!("{count} evaluations (1000 instances x 2 modes), worst rel err {worst:.1e} (< 1e-5)"))
}

fn morphology() -> Outcome {
    let (h, w) = (64, 64);
    let alpha: Vec<f64> = (0..h * w).map(|i| if (22..42).contains(&(i / w)) && (22..42).contains(&(i % w)) { 1.0 } else { 0.0 }).collect();
    let ours = trimap_with_kernels(&Plane::new(1, h, w, alpha.clone()).unwrap(), 3, 3);
    let oracle = common::trimap(&alpha, h, w, 3, 3);
    let band = |t: &[f64]| (0..w).filter(|&x| t[32 * w + x] == 0.5).count() / 2;
    let equal = ours.data() == oracle.as_slice();
    outcome(equal, format!("trimap identical to brute force {equal}; band width {} px per side (oracle {})", band(ours.data()), band(&oracle)))
}

struct Overfit {
    model: Model<f32>,
    eval: Vec<LabeledInput<f32>>,
}

fn overfit_options(steps: usize) -> TrainOptions {
    let mut o = TrainOptions::tiny();
    o.run.batch_size = 8;
    o.run.epochs = steps;
    o.run.crop_size = 64;
    o.schedule = LrSchedule::Constant;
    o.augment = AugmentConfig { kernel_min: 5, kernel_max: 5, ..AugmentConfig::identity(64) };
    o
}

fn eval_set(data: &[MattingSample]) -> Vec<LabeledInput<f32>> {
    data.iter()
        .map(|s| LabeledInput {
            input: MattingInput::new(s.composite().unwrap(), trimap_with_kernels(&s.alpha, 5, 5)).unwrap(),
            alpha: s.alpha.clone(),
        })
        .collect()
}

fn overfit(state: &mut Option<Overfit>) -> Outcome {
    let start = Instant::now();
    let data = synth_samples(8, 64, 64, 0);
    let eval = eval_set(&data);
    let new = || Trainer::new(Model::init(ModelConfig::tiny(), 0).unwrap(), overfit_options(500)).unwrap();

    let mut twin = new();
    let mut t = new();
    let sad0 = evaluate_model(&t.model, &eval, AttentionMode::Normal, RegionMode::UnknownOnly).unwrap().sad;
    for _ in 0..10 {
        t.step(&data).unwrap();
        twin.step(&data).unwrap();
    }
    let identical = t.model.params == twin.model.params;
    while t.step_count() < 500 {
        t.step(&data).unwrap();
    }
    let sad = evaluate_model(&t.model, &eval, AttentionMode::Normal, RegionMode::UnknownOnly).unwrap().sad;
    let reduction = 1.0 - sad / sad0;
    let secs = start.elapsed().as_secs_f64();
    *state = Some(Overfit { model: t.model, eval });
    outcome(
        reduction >= 0.8 && identical && secs < 600.0,
        format!("SAD {sad0:.4} -> {sad:.4}, reduction {:.1}% (>= 80%); bit-identical at step 10 {identical}; {secs:.0}s", 100.0 * reduction),
    )
}

fn grid_drift(state: &Option<Overfit>) -> Outcome {
    let Some(s) = state else { return outcome(false, "overfit run unavailable".into()) };
    let normal = evaluate_model(&s.model, &s.eval, AttentionMode::Normal, RegionMode::UnknownOnly).unwrap().sad;
    let grid = evaluate_model(&s.model, &s.eval, AttentionMode::GridSample, RegionMode::UnknownOnly).unwrap().sad;
    let drift = (grid - normal).abs() / normal;
    outcome(drift <= 0.10, format!("SAD normal {normal:.5}, grid {grid:.5}, relative drift {:.2}% (<= 10%)", 100.0 * drift))
}

fn main() {
    let mut state = None;
    let mut results: Vec<(&str, Outcome)> = vec![
        ("cost ratios", cost_ratios()),
        ("conv-neck overhead", neck_overhead()),
        ("dcm vs sfp", dcm_vs_sfp()),
        ("grid-sample memory", grid_memory()),
        ("parameter budget", parameter_budget()),
        ("gradient suite", gradient_suite()),
        ("attention equivalences", attention_equivalences()),
        ("pretrained mapping", pretrained_mapping()),
        ("metric oracles", metric_oracles()),
        ("morphology oracle", morphology()),
    ];
    results.push(("overfit sanity", overfit(&mut state)));
    results.push(("grid vs normal drift", grid_drift(&state)));
    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} passed", results.len() - failed, results.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
