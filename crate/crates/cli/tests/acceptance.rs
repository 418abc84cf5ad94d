//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any of them fails.
//!
//! Criteria run sequentially on purpose: the sweep criterion compares
//! measured step rates, which concurrent tests would distort.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use stpn_core::config::RunConfig;
use stpn_core::encoder::{
    conv_prompt_downscale, encode_plain, encode_prompted_deep, encode_prompted_shallow, ConvParams, EncoderConfig,
    EncoderParams,
};
use stpn_core::harness::{split_dataset, train, TrainOptions, SWEEP_HEADER};
use stpn_core::numcore::{Rng, Tensor};
use stpn_core::predictor::{
    predict_mixer, predict_transformer, sample_support_indices, MixerPredictorParams, SupportSpec,
    TransformerPredictorParams,
};
use stpn_core::synthvid::{gen_dataset, motion_iou_category, AnnotatedBox, SpeedCategory};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Amber,
    Fail,
}

type Check = Result<(Status, String), String>;
type Criterion = (&'static str, &'static str, fn() -> Check);

fn pass(detail: impl Into<String>) -> Check {
    Ok((Status::Pass, detail.into()))
}

fn fail(detail: impl Into<String>) -> Check {
    Ok((Status::Fail, detail.into()))
}

fn within(limit: Duration, start: Instant, detail: String) -> Check {
    let took = start.elapsed();
    if took > limit {
        fail(format!(
            "{detail}; took {:.1}s, limit {:.0}s",
            took.as_secs_f64(),
            limit.as_secs_f64()
        ))
    } else {
        pass(detail)
    }
}

fn stpn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stpn"));
    c.env("STPN_THREADS", "1").env("RUST_LOG", "warn");
    c
}

fn run_ok(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "{:?} exited with {:?}: {}",
            cmd,
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn random_encoder(rng: &mut Rng) -> EncoderParams<Tensor> {
    let ph = rng.range_inclusive(1, 3) as usize;
    let pw = rng.range_inclusive(1, 3) as usize;
    let heads = rng.range_inclusive(1, 3) as usize;
    let cfg = EncoderConfig {
        image: (
            ph * rng.range_inclusive(1, 3) as usize,
            pw * rng.range_inclusive(1, 3) as usize,
        ),
        patch: (ph, pw),
        depth: rng.range_inclusive(1, 3) as usize,
        width: heads * rng.range_inclusive(1, 4) as usize,
        heads,
        ffn_hidden: rng.range_inclusive(1, 8) as usize,
        ln_eps: 1e-5,
        pos_embed: rng.bernoulli(0.5),
    };
    let mut p = EncoderParams::init(&cfg, rng.next_u64()).expect("valid config");
    // larger weights than the 0.02 init so any leak of prompt rows would show
    let mut wrng = Rng::new(rng.next_u64());
    p = p.map(&mut |t| t.add(&wrng.normal_tensor(t.shape(), 0.5)).expect("same shape"));
    p
}

fn empty_prompt_identity() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    for i in 0..20 {
        let p = random_encoder(&mut rng);
        let (h, w) = p.config.image;
        let frame = rng.normal_tensor(&[3, h, w], 1.0);
        let d = p.config.width;
        let plain = encode_plain(&frame, &p).map_err(|e| e.to_string())?;
        let shallow = encode_prompted_shallow(&frame, &Tensor::zeros(&[0, d]), &p).map_err(|e| e.to_string())?;
        let sets = vec![Tensor::zeros(&[0, d]); p.config.depth];
        let deep = encode_prompted_deep(&frame, &sets, &p).map_err(|e| e.to_string())?;
        if shallow != plain || deep != plain {
            return fail(format!("config {i} ({:?}) differs from the plain encoder", p.config));
        }
    }
    within(
        Duration::from_secs(10),
        start,
        "20 random configs bit-identical (shallow and deep)".into(),
    )
}

fn gradient_suite() -> Check {
    let start = Instant::now();
    let out = stpn().arg("gradcheck").output().map_err(|e| e.to_string())?;
    let csv = String::from_utf8_lossy(&out.stdout);
    let mut worst: f64 = 0.0;
    let mut groups = Vec::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let err: f64 = f[1].parse().map_err(|_| format!("bad row {line:?}"))?;
        worst = worst.max(err);
        groups.push(f[0].to_string());
    }
    for needed in ["encoder", "prompts", "transformer-predictor", "mixer-predictor"] {
        if !groups.iter().any(|g| g == needed) {
            return fail(format!("group {needed} missing from report"));
        }
    }
    if !out.status.success() || worst >= 1e-4 {
        return fail(format!("exit {:?}, max relative error {worst:.3e}", out.status.code()));
    }
    within(
        Duration::from_secs(120),
        start,
        format!("{} groups, max relative error {worst:.3e}", groups.len()),
    )
}

fn permutation_invariance() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(77);
    let (n, d, np, k) = (6, 8, 4, 5);
    let support: Vec<Tensor> = (0..k).map(|_| rng.normal_tensor(&[n, d], 1.0)).collect();
    let mut mixer = MixerPredictorParams::init(n, d, np, 3);
    mixer = mixer.map(&mut |t| t.add(&rng.normal_tensor(t.shape(), 0.3)).expect("same shape"));
    let mut tr = TransformerPredictorParams::init(d, np, 4);
    tr = tr.map(&mut |t| t.add(&rng.normal_tensor(t.shape(), 0.3)).expect("same shape"));
    let base_m = predict_mixer(&support, &mixer, 1e-5).map_err(|e| e.to_string())?;
    let base_t = predict_transformer(&support, &tr, 2, 1e-5).map_err(|e| e.to_string())?;
    let mut worst_t: f64 = 0.0;
    let mut order: Vec<usize> = (0..k).collect();
    for _ in 0..100 {
        rng.shuffle(&mut order);
        let perm: Vec<Tensor> = order.iter().map(|&i| support[i].clone()).collect();
        let m = predict_mixer(&perm, &mixer, 1e-5).map_err(|e| e.to_string())?;
        if m != base_m {
            return fail(format!("mixer output changed under ordering {order:?}"));
        }
        let t = predict_transformer(&perm, &tr, 2, 1e-5).map_err(|e| e.to_string())?;
        worst_t = worst_t.max(t.0.max_abs_diff(&base_t.0));
    }
    if worst_t > 1e-12 {
        return fail(format!("transformer max abs diff {worst_t:.3e}"));
    }
    within(
        Duration::from_secs(30),
        start,
        format!("mixer bit-identical, transformer max abs diff {worst_t:.1e} over 100 orderings"),
    )
}

fn sampling_example() -> Check {
    let spec = SupportSpec {
        stride: 2,
        count: 6,
        ..SupportSpec::default()
    };
    let idx = sample_support_indices(100, &spec, 1000).map_err(|e| e.to_string())?;
    let offsets: Vec<i64> = idx.iter().map(|&i| i as i64 - 100).collect();
    if offsets == [-6, -4, -2, 2, 4, 6] {
        pass(format!("offsets {offsets:?}"))
    } else {
        fail(format!("offsets {offsets:?}"))
    }
}

/// Pads a 3×3×c map by 2 into a 7×7 grid and convolves explicitly.
fn naive_conv(prompts: &Tensor, kernel: &Tensor, bias: &Tensor) -> Vec<f64> {
    let c = prompts.shape()[1];
    let o = kernel.shape()[0];
    let mut grid = vec![vec![vec![0.0; c]; 7]; 7];
    for r in 0..9 {
        grid[r / 3 + 2][r % 3 + 2] = prompts.row(r).to_vec();
    }
    let mut out = Vec::new();
    for oy in 0..3 {
        for ox in 0..3 {
            for oc in 0..o {
                let mut acc = bias.data()[oc];
                for ky in 0..3 {
                    for kx in 0..3 {
                        for (ic, v) in grid[2 * oy + ky][2 * ox + kx].iter().enumerate() {
                            acc += kernel.data()[((oc * c + ic) * 3 + ky) * 3 + kx] * v;
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn conv_arithmetic() -> Check {
    let ones = ConvParams {
        kernel: Tensor::ones(&[1, 1, 3, 3]),
        bias: Tensor::zeros(&[1]),
    };
    let out = conv_prompt_downscale(&Tensor::ones(&[9, 1]), &ones).map_err(|e| e.to_string())?;
    let want = [1.0, 3.0, 1.0, 3.0, 9.0, 3.0, 1.0, 3.0, 1.0];
    if out.shape() != [9, 1] || out.data() != want {
        return fail(format!("all-ones output {:?} with shape {:?}", out.data(), out.shape()));
    }
    let mut rng = Rng::new(5);
    let prompts = rng.normal_tensor(&[9, 4], 1.0);
    let conv = ConvParams {
        kernel: rng.normal_tensor(&[3, 4, 3, 3], 1.0),
        bias: rng.normal_tensor(&[3], 1.0),
    };
    let got = conv_prompt_downscale(&prompts, &conv).map_err(|e| e.to_string())?;
    let oracle = naive_conv(&prompts, &conv.kernel, &conv.bias);
    let diff = got
        .data()
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if got.shape() != [9, 3] || diff > 1e-12 {
        return fail(format!("random case shape {:?}, max diff {diff:.3e}", got.shape()));
    }
    pass("3x3 map stays 3x3; all-ones gives [[1,3,1],[3,9,3],[1,3,1]]; random case matches naive oracle")
}

fn shifted(step: f64) -> Vec<AnnotatedBox> {
    (0..25)
        .map(|t| AnnotatedBox::new(step * t as f64, 0.0, step * t as f64 + 10.0, 10.0))
        .collect()
}

fn miou_categorizer() -> Check {
    let cases = [
        (0.0, SpeedCategory::Slow, 1.0),
        (0.5, SpeedCategory::Fast, 1.0 / 3.0),
        (0.1, SpeedCategory::Medium, 9.0 / 11.0),
    ];
    let mut detail = Vec::new();
    for (step, cat, m) in cases {
        let (got, score) = motion_iou_category(&shifted(step), 10).map_err(|e| e.to_string())?;
        if got != cat || (score - m).abs() > 1e-9 {
            return fail(format!("shift {step}/frame gave {got:?} {score}"));
        }
        detail.push(format!("{}={score:.3}", got.as_str()));
    }
    pass(detail.join(", "))
}

fn robustness_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_overrides(&[
        "gen.clips=600",
        "gen.frames=8",
        "gen.size=32x32",
        "gen.classes=4",
        "gen.occl_frac=1.0",
        "gen.degrade_prob=0.5",
        "gen.blur_len=5",
        "classes=4",
        "patch=8x8",
        "depth=2",
        "width=32",
        "heads=2",
        "ffn_hidden=64",
        "predictor=transformer",
        "S=1",
        "K=4",
        "NP=4",
        "lr=0.002",
        "batch=16",
        "steps=1500",
        "eval_every=1500",
        "eval_split=0.2",
    ])
    .expect("valid overrides");
    c
}

fn robustness_signal() -> Check {
    let start = Instant::now();
    let opts = TrainOptions::from_env().map_err(|e| e.to_string())?;
    let mut margins = Vec::new();
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = robustness_config();
        cfg.seed = seed;
        cfg.gen.seed = 100 + seed;
        let g = &cfg.gen;
        let clips = gen_dataset(g.seed, g.clips, g.frames, g.height, g.width, g.classes, &g.degradation)
            .map_err(|e| e.to_string())?;
        let (tr, ev) = split_dataset(&clips, cfg.eval_split).map_err(|e| e.to_string())?;
        let mut accs = Vec::new();
        for injection in ["none", "shallow"] {
            let mut c = cfg.clone();
            c.set("injection", injection).map_err(|e| e.to_string())?;
            let out = train(&c, tr, ev, &opts).map_err(|e| e.to_string())?;
            let rec = out.history.last().ok_or("no evaluation recorded")?;
            accs.push(rec.acc_degraded.ok_or("no degraded eval frames")?);
        }
        margins.push(accs[1] - accs[0]);
        lines.push(format!("seed {seed}: baseline {:.3}, shallow {:.3}", accs[0], accs[1]));
    }
    let margin = 100.0 * margins.iter().sum::<f64>() / margins.len() as f64;
    let detail = format!("mean degraded-frame margin {margin:+.1} points ({})", lines.join("; "));
    let took = start.elapsed().as_secs_f64();
    if took > 20.0 * 60.0 {
        return fail(format!("{detail}; took {took:.0}s, limit 1200s"));
    }
    if margin >= 8.0 {
        pass(detail)
    } else if margin >= 3.0 {
        Ok((Status::Amber, detail))
    } else {
        fail(detail)
    }
}

fn small_run_config(dir: &Path) -> Result<std::path::PathBuf, String> {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "gen.clips = 120\ngen.frames = 8\ngen.size = 16x16\npatch = 4x4\nwidth = 16\nheads = 2\n\
         ffn_hidden = 32\nS = 1\nK = 2\nNP = 3\nsteps = 150\nbatch = 8\neval_every = 50\nlr = 0.005\n",
    )
    .map_err(|e| e.to_string())?;
    Ok(path)
}

fn shallow_vs_deep() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_run_config(dir.path())?;
    let mut rows = Vec::new();
    for inj in ["shallow", "deep"] {
        let out = dir.path().join(inj);
        run_ok(
            stpn()
                .args(["train", "--config"])
                .arg(&cfg)
                .args(["--override", &format!("injection={inj}"), "--out"])
                .arg(&out),
        )?;
        let metrics = std::fs::read_to_string(out.join("metrics.csv")).map_err(|e| e.to_string())?;
        let last = metrics.lines().last().unwrap_or_default().to_string();
        let f: Vec<&str> = last.split(',').collect();
        let loss: f64 = f
            .get(1)
            .and_then(|v| v.parse().ok())
            .ok_or(format!("bad row {last:?}"))?;
        if f.len() != 9 || !loss.is_finite() || metrics.lines().count() != 4 {
            return fail(format!("{inj}: unexpected metrics {metrics:?}"));
        }
        rows.push(format!("{inj} loss {loss:.3} acc {}", f[2]));
    }
    pass(rows.join("; "))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_run_config(dir.path())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        run_ok(stpn().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out))?;
        let metrics = std::fs::read(out.join("metrics.csv")).map_err(|e| e.to_string())?;
        let ckpt = std::fs::read(out.join("final.ckpt")).map_err(|e| e.to_string())?;
        outputs.push((metrics, ckpt));
    }
    if outputs[0] != outputs[1] {
        return fail("metrics.csv or final.ckpt differ between runs");
    }
    pass(format!(
        "metrics.csv ({} B) and final.ckpt ({} B) byte-identical",
        outputs[0].0.len(),
        outputs[0].1.len()
    ))
}

fn sweep_rates(dir: &Path, cfg: &Path, param: &str, values: &str, extra: &[&str]) -> Result<Vec<(usize, f64)>, String> {
    let out = dir.join(param);
    let mut cmd = stpn();
    cmd.args(["sweep", "--config"])
        .arg(cfg)
        .args(["--param", param, "--values", values, "--out"])
        .arg(&out);
    for e in extra {
        cmd.args(["--override", e]);
    }
    run_ok(&mut cmd)?;
    let table = std::fs::read_to_string(out.join("sweep.csv")).map_err(|e| e.to_string())?;
    let mut lines = table.lines();
    if lines.next() != Some(SWEEP_HEADER) {
        return Err(format!("bad header in {table:?}"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let acc: f64 = f[2].parse().map_err(|_| format!("bad row {line:?}"))?;
        if f.len() != 5 || f[0] != param || !(0.0..=1.0).contains(&acc) {
            return Err(format!("bad row {line:?}"));
        }
        rows.push((
            f[1].parse().map_err(|_| format!("bad row {line:?}"))?,
            f[4].parse().map_err(|_| format!("bad row {line:?}"))?,
        ));
    }
    Ok(rows)
}

fn sweep_tables() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    // few image tokens and a wide model, so prompt and support tokens dominate
    // the step cost and the ordering is not lost in timer noise
    let cfg = dir.path().join("sweep.cfg");
    std::fs::write(
        &cfg,
        "gen.clips = 40\ngen.size = 32x32\npatch = 16x16\nwidth = 64\nheads = 4\nffn_hidden = 256\n\
         S = 1\nsteps = 100\nbatch = 8\neval_every = 100\n",
    )
    .map_err(|e| e.to_string())?;
    let k = sweep_rates(dir.path(), &cfg, "K", "1,3,7", &["NP=7"])?;
    let np = sweep_rates(dir.path(), &cfg, "NP", "3,7,13", &["K=1"])?;
    let fmt = |rows: &[(usize, f64)]| {
        rows.iter()
            .map(|(v, r)| format!("{v}:{r:.1}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let detail = format!("steps/sec K {} | NP {}", fmt(&k), fmt(&np));
    let values_ok = k.iter().map(|r| r.0).eq([1, 3, 7]) && np.iter().map(|r| r.0).eq([3, 7, 13]);
    let non_increasing = |rows: &[(usize, f64)]| rows.windows(2).all(|w| w[1].1 <= w[0].1);
    if values_ok && non_increasing(&k) && non_increasing(&np) {
        pass(detail)
    } else {
        fail(detail)
    }
}

/// Tiny run (d=16, L=2, 50 clips of 16×16, 200 steps): the training loss
/// must fall at least 30% below its starting value near ln C.
fn tiny_run_learns() -> Check {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(&[
        "gen.clips=50",
        "gen.size=16x16",
        "gen.degrade_prob=0",
        "patch=4x4",
        "width=16",
        "heads=2",
        "ffn_hidden=32",
        "depth=2",
        "S=1",
        "K=2",
        "NP=4",
        "steps=200",
        "batch=16",
        "eval_every=200",
        "lr=0.01",
    ])
    .map_err(|e| e.to_string())?;
    let g = &cfg.gen;
    let clips = gen_dataset(g.seed, g.clips, g.frames, g.height, g.width, g.classes, &g.degradation)
        .map_err(|e| e.to_string())?;
    let (tr, ev) = split_dataset(&clips, cfg.eval_split).map_err(|e| e.to_string())?;
    let out = train(&cfg, tr, ev, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let first = out.losses[0];
    let tail = &out.losses[out.losses.len() - 20..];
    let last = tail.iter().sum::<f64>() / tail.len() as f64;
    let detail = format!(
        "first-step loss {first:.3} (ln 4 = {:.3}), last-20 mean {last:.3}",
        4f64.ln()
    );
    if (first - 4f64.ln()).abs() < 0.1 && last <= 0.7 * first {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1", "empty-prompt identity", empty_prompt_identity),
        ("2", "gradient suite", gradient_suite),
        ("3", "predictor permutation invariance", permutation_invariance),
        ("4", "support sampling example", sampling_example),
        ("5", "conv prompt arithmetic", conv_arithmetic),
        ("6", "motion-IoU categorizer", miou_categorizer),
        ("7", "degraded-frame robustness", robustness_signal),
        ("8", "shallow vs deep", shallow_vs_deep),
        ("9", "determinism", determinism),
        ("10", "sweep tables", sweep_tables),
        ("x", "tiny run loss decrease", tiny_run_learns),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(r) => r,
            Err(e) => (Status::Fail, format!("error: {e}")),
        };
        let tag = match status {
            Status::Pass => "PASS",
            Status::Amber => "AMBER",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
        };
        println!("[{tag}] {id} {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
