//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Runs under `cargo test` with its own harness.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use sfda_core::config::Config;
use sfda_core::consistency;
use sfda_core::gradsuite::{self, SuiteConfig};
use sfda_core::io::checkpoint;
use sfda_core::io::container::Container;
use sfda_core::io::dataset;
use sfda_core::io::metrics;
use sfda_core::losses::{cmk_mmd, KernelSpec, LossWeights};
use sfda_core::model::adm::AdmConfig;
use sfda_core::model::{BackboneConfig, ForwardMode, Model, ParamGroup};
use sfda_core::pipeline;
use sfda_core::pseudolabel::{self, CentroidConfig, Space};
use sfda_core::synthdata;
use sfda_tensor::{Tape, Tensor};

type Rows = Vec<Vec<f64>>;

struct Line {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn line(id: &'static str, title: &'static str, pass: bool, detail: String) -> Line {
    Line { id, title, pass, detail }
}

fn main() {
    let mut lines = Vec::new();
    let e2e = match end_to_end() {
        Ok(r) => Some(r),
        Err(e) => {
            println!("end-to-end run failed: {e}");
            None
        }
    };

    lines.push(gradient_suite());
    lines.push(mmd_properties());
    lines.push(oracle_equivalence());
    lines.extend(structural(e2e.as_ref()));
    lines.extend(ladder_lines(e2e.as_ref()));
    lines.extend(determinism(e2e.as_ref()));

    for l in &lines {
        println!("[{}] {} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.title, l.detail);
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Gradients

fn gradient_suite() -> Line {
    let t = Instant::now();
    let cfg = SuiteConfig::default();
    match gradsuite::run(&cfg) {
        Ok(checks) => {
            let secs = t.elapsed().as_secs_f64();
            let pass = checks.iter().all(|c| c.passes(20)) && secs < 120.0;
            let detail = checks
                .iter()
                .map(|c| format!("{} {}×{:.1e}", c.name, c.report.checked, c.report.max_rel_err))
                .collect::<Vec<_>>()
                .join(", ");
            line("1", "gradient suite", pass, format!("{detail}; {secs:.1}s"))
        }
        Err(e) => line("1", "gradient suite", false, e.to_string()),
    }
}

// ---------------------------------------------------------------------------
// 2. MMD

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        (v[h - 1] + v[h]) / 2.0
    }
}

fn mmd_oracle(x: &Rows, y: &Rows, spec: &KernelSpec) -> f64 {
    let all: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let s2 = match spec.bandwidth {
        Some(s) => s * s,
        None => {
            let mut d = Vec::new();
            for i in 0..all.len() {
                for j in i + 1..all.len() {
                    d.push(sq(all[i], all[j]));
                }
            }
            median(d)
        }
    };
    let k = |a: &[f64], b: &[f64]| -> f64 {
        spec.multipliers
            .iter()
            .zip(&spec.weights)
            .map(|(m, g)| g * (-sq(a, b) / (2.0 * (m * m * s2).max(1e-12))).exp())
            .sum()
    };
    let mean = |p: &Rows, q: &Rows| -> f64 {
        let mut s = 0.0;
        for a in p {
            for b in q {
                s += k(a, b);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    mean(x, x) + mean(y, y) - 2.0 * mean(x, y)
}

fn cmk_oracle(x: &Rows, lx: &[usize], y: &Rows, ly: &[usize], spec: &KernelSpec) -> f64 {
    if x.is_empty() || y.is_empty() {
        return 0.0;
    }
    if spec.pooled {
        return mmd_oracle(x, y, spec);
    }
    let mut vals = Vec::new();
    for c in 0..8 {
        let xs: Rows = x.iter().zip(lx).filter(|(_, &l)| l == c).map(|(r, _)| r.clone()).collect();
        let ys: Rows = y.iter().zip(ly).filter(|(_, &l)| l == c).map(|(r, _)| r.clone()).collect();
        if !xs.is_empty() && !ys.is_empty() {
            vals.push(mmd_oracle(&xs, &ys, spec));
        }
    }
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

fn cmk_value(x: &Rows, lx: &[usize], y: &Rows, ly: &[usize], spec: &KernelSpec) -> f64 {
    let mut tape = Tape::<f64>::new();
    let f = x.first().or(y.first()).map_or(1, |r| r.len());
    let to_var = |tape: &mut Tape<f64>, r: &Rows| {
        let data: Vec<f64> = r.iter().flatten().copied().collect();
        tape.constant(Tensor::new([r.len(), f], data).unwrap())
    };
    let (ex, hy) = (to_var(&mut tape, x), to_var(&mut tape, y));
    let m = cmk_mmd(&mut tape, ex, lx, hy, ly, spec).unwrap();
    tape.value(m.value).item()
}

fn rand_rows(rng: &mut ChaCha8Rng, n: usize, f: usize, scale: f64) -> Rows {
    (0..n).map(|_| (0..f).map(|_| scale * rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn mmd_properties() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut min_val, mut max_self, mut max_pair_err, mut max_oracle_err) = (f64::INFINITY, 0f64, 0f64, 0f64);
    let mut perm_ok = true;
    for _ in 0..200 {
        let f = rng.gen_range(1..=6);
        let classes = rng.gen_range(1..=3);
        let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
        let (m, n) = (rng.gen_range(1..=12), rng.gen_range(1..=12));
        let x = rand_rows(&mut rng, m, f, scale);
        let y = rand_rows(&mut rng, n, f, scale);
        let lx: Vec<usize> = (0..m).map(|_| rng.gen_range(0..classes)).collect();
        let ly: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let spec = KernelSpec {
            bandwidth: rng.gen_bool(0.5).then(|| rng.gen_range(0.3..3.0) * scale),
            pooled: rng.gen_bool(0.2),
            ..KernelSpec::default()
        };

        let v = cmk_value(&x, &lx, &y, &ly, &spec);
        min_val = min_val.min(v);
        let o = cmk_oracle(&x, &lx, &y, &ly, &spec);
        max_oracle_err = max_oracle_err.max((v - o).abs() / o.abs().max(1.0));
        max_self = max_self.max(cmk_value(&x, &lx, &x, &lx, &spec).abs());

        let mut px: Vec<usize> = (0..m).collect();
        let mut py: Vec<usize> = (0..n).collect();
        px.shuffle(&mut rng);
        py.shuffle(&mut rng);
        let xp: Rows = px.iter().map(|&i| x[i].clone()).collect();
        let yp: Rows = py.iter().map(|&i| y[i].clone()).collect();
        let lxp: Vec<usize> = px.iter().map(|&i| lx[i]).collect();
        let lyp: Vec<usize> = py.iter().map(|&i| ly[i]).collect();
        perm_ok &= cmk_value(&xp, &lxp, &yp, &lyp, &spec).to_bits() == v.to_bits();

        let sigma = rng.gen_range(0.3..3.0) * scale;
        let (a, b) = (rand_rows(&mut rng, 1, f, scale), rand_rows(&mut rng, 1, f, scale));
        let got = cmk_value(&a, &[0], &b, &[0], &KernelSpec::single(sigma));
        let want = 2.0 - 2.0 * (-sq(&a[0], &b[0]) / (2.0 * sigma * sigma)).exp();
        max_pair_err = max_pair_err.max((got - want).abs());
    }
    let pass = min_val >= -1e-9 && max_self < 1e-9 && perm_ok && max_pair_err <= 1e-10 && max_oracle_err < 1e-10;
    line(
        "2",
        "MMD properties",
        pass,
        format!(
            "200 instances: min {min_val:.2e}, self {max_self:.2e}, permutation {}, pair err {max_pair_err:.2e}, brute-force err {max_oracle_err:.2e}",
            if perm_ok { "bitwise" } else { "DIFFERS" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Pseudo-label and consistency oracles

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn oracle_centroids(f: &Rows, z: &Rows) -> Rows {
    let (c, d) = (z[0].len(), f[0].len());
    let p: Rows = z.iter().map(|r| softmax(r)).collect();
    (0..c)
        .map(|k| {
            let w: f64 = p.iter().map(|r| r[k]).sum::<f64>().max(1e-12);
            (0..d).map(|j| f.iter().zip(&p).map(|(fi, pi)| pi[k] * fi[j]).sum::<f64>() / w).collect()
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

fn oracle_assign(f: &Rows, c: &Rows) -> Vec<usize> {
    f.iter()
        .map(|fi| {
            let u = unit(fi);
            let dist: Vec<f64> = c.iter().map(|ck| 1.0 - u.iter().zip(unit(ck)).map(|(a, b)| a * b).sum::<f64>()).collect();
            (0..dist.len()).fold(0, |best, k| if dist[k] < dist[best] { k } else { best })
        })
        .collect()
}

fn oracle_refine(f: &Rows, labels: &[usize], prev: &Rows) -> Rows {
    prev.iter()
        .enumerate()
        .map(|(k, pk)| {
            let members: Vec<&Vec<f64>> = f.iter().zip(labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
            if members.is_empty() {
                return pk.clone();
            }
            (0..pk.len()).map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64).collect()
        })
        .collect()
}

fn oracle_pseudo(f: &Rows, z: &Rows, cfg: CentroidConfig) -> Vec<usize> {
    let mut c = oracle_centroids(f, z);
    let mut labels = oracle_assign(f, &c);
    for _ in 0..cfg.rounds {
        let fresh = oracle_refine(f, &labels, &c);
        for (ck, rk) in c.iter_mut().zip(&fresh) {
            for (a, b) in ck.iter_mut().zip(rk) {
                *a = cfg.momentum * *a + (1.0 - cfg.momentum) * b;
            }
        }
        labels = oracle_assign(f, &c);
    }
    labels
}

/// Final labels by brute force: consistent samples keep their label, the rest
/// take a k-nearest-neighbour vote among consistent samples.
fn oracle_consensus(f: &Rows, lc: &[usize], lg: &[usize], k: usize) -> (Vec<usize>, Vec<usize>, Rows, Vec<usize>) {
    let easy: Vec<usize> = (0..f.len()).filter(|&i| lc[i] == lg[i]).collect();
    let hard: Vec<usize> = (0..f.len()).filter(|&i| lc[i] != lg[i]).collect();
    if easy.is_empty() {
        return (easy, hard, Vec::new(), lc.to_vec());
    }
    let s: Rows = hard
        .iter()
        .map(|&h| easy.iter().map(|&e| unit(&f[h]).iter().zip(unit(&f[e])).map(|(a, b)| a * b).sum()).collect())
        .collect();
    let kk = k.min((easy.len() - 1).max(1)).max(1);
    let mut out = lc.to_vec();
    for (r, &h) in hard.iter().enumerate() {
        let mut order: Vec<usize> = (0..easy.len()).collect();
        order.sort_by(|&a, &b| s[r][b].total_cmp(&s[r][a]).then(a.cmp(&b)));
        let mut votes = BTreeMap::<usize, (usize, f64)>::new();
        for &j in &order[..kk] {
            let e = votes.entry(lc[easy[j]]).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += s[r][j];
        }
        // Most votes, then larger similarity mass, then smaller class.
        let best = votes
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.total_cmp(&b.1 .1)).then(b.0.cmp(a.0)))
            .map(|(&c, _)| c)
            .unwrap();
        out[h] = best;
    }
    (easy, hard, s, out)
}

fn tensor(r: &Rows) -> Tensor<f64> {
    Tensor::from_rows(r).unwrap()
}

fn max_diff(t: &Tensor<f64>, r: &Rows) -> f64 {
    r.iter().flatten().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = CentroidConfig::default();
    let (mut label_mismatch, mut max_err, mut hard_total) = (0usize, 0f64, 0usize);
    for _ in 0..100 {
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(c..=200);
        let d = rng.gen_range(2..=16);
        let k = rng.gen_range(1..=7);
        // Clustered features so that both spaces mostly agree.
        let centers = rand_rows(&mut rng, c, d, 2.0);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let f: Rows = truth.iter().map(|&y| centers[y].iter().map(|v| v + rng.gen_range(-1.0..1.0)).collect()).collect();
        let z = rand_rows(&mut rng, n, c, 3.0);
        let fg: Rows = f.iter().map(|r| r.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect()).collect();
        let zg = rand_rows(&mut rng, n, c, 3.0);
        let (tf, tz, tfg, tzg) = (tensor(&f), tensor(&z), tensor(&fg), tensor(&zg));

        let c0 = pseudolabel::init_centroids(&tf, &tz).unwrap();
        let oc0 = oracle_centroids(&f, &z);
        max_err = max_err.max(max_diff(&c0, &oc0));
        let a0 = pseudolabel::assign_labels(&tf, &c0).unwrap();
        label_mismatch += (a0 != oracle_assign(&f, &oc0)) as usize;
        let r0 = pseudolabel::refine(&tf, &a0, &c0).unwrap();
        max_err = max_err.max(max_diff(&r0, &oracle_refine(&f, &a0, &oc0)));

        let lc = pseudolabel::evaluate(&tf, &tz, cfg, Space::Classifier).unwrap();
        let lg = pseudolabel::evaluate(&tfg, &tzg, cfg, Space::Assistant).unwrap();
        let (olc, olg) = (oracle_pseudo(&f, &z, cfg), oracle_pseudo(&fg, &zg, cfg));
        label_mismatch += (lc.labels != olc) as usize + (lg.labels != olg) as usize;

        let cons = consistency::build(&lc, &lg, &tf, k, 1).unwrap();
        let (easy, hard, s, labels) = oracle_consensus(&f, &olc, &olg, k);
        hard_total += hard.len();
        label_mismatch += (cons.bank.easy.indices != easy) as usize + (cons.bank.hard.indices != hard) as usize;
        label_mismatch += (cons.labels != labels) as usize;
        if !easy.is_empty() && !hard.is_empty() {
            let sm = consistency::rating_matrix(&cons.bank).unwrap();
            max_err = max_err.max(max_diff(&sm, &s));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = label_mismatch == 0 && max_err <= 1e-8 && secs < 60.0;
    line(
        "3",
        "oracle equivalence",
        pass,
        format!("100 instances, {hard_total} hard samples voted: {label_mismatch} label mismatches, max value err {max_err:.2e}; {secs:.1}s"),
    )
}

// ---------------------------------------------------------------------------
// 5. End to end (runs first; 4 and 6 reuse its state)

struct Run {
    name: &'static str,
    accuracy: f64,
    rows: Vec<metrics::MetricsRow>,
    partition_ok: bool,
    frozen_ok: bool,
    model: Model<f32>,
}

struct EndToEnd {
    cfg: Config,
    source_acc: f64,
    source_only: f64,
    runs: Vec<Run>,
    secs: f64,
    target_bytes: Vec<u8>,
    checkpoint_bytes: Vec<u8>,
}

fn frozen_bits(m: &Model<f32>) -> Vec<Vec<u32>> {
    let params = m.state.params().iter().filter(|p| p.group != ParamGroup::Backbone).map(|p| &p.value);
    params.chain(m.state.buffers().iter().map(|b| &b.value)).map(|t| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

fn target_meta(cfg: &Config) -> BTreeMap<String, String> {
    let mut meta = cfg.snapshot();
    meta.insert("stage".into(), "target".into());
    meta.insert("epoch".into(), cfg.adapt.target_epochs.to_string());
    meta
}

fn adapt_run(
    name: &'static str,
    source: &Model<f32>,
    images: &Tensor<f32>,
    truth: &[usize],
    cfg: &pipeline::AdaptConfig,
) -> sfda_core::Result<Run> {
    let mut model = source.clone();
    let before = frozen_bits(&model);
    let n = truth.len();
    let mut rows = Vec::new();
    let mut partition_ok = true;
    pipeline::adapt_target(&mut model, images, cfg, &mut |r| {
        let mut seen = vec![0u8; n];
        r.bank.easy.indices.iter().chain(&r.bank.hard.indices).for_each(|&i| seen[i] += 1);
        partition_ok &= r.bank.easy.indices.len() + r.bank.hard.indices.len() == n && seen.iter().all(|&s| s == 1);
        rows.push(r.metrics(truth));
        Ok(())
    })?;
    let frozen_ok = frozen_bits(&model) == before;
    let accuracy = pipeline::evaluate(&model, images, truth)?.accuracy;
    println!("{name}: target accuracy {accuracy:.4}");
    Ok(Run {
        name,
        accuracy,
        rows,
        partition_ok,
        frozen_ok,
        model,
    })
}

fn end_to_end() -> sfda_core::Result<EndToEnd> {
    let t = Instant::now();
    let mut cfg = Config::default();
    cfg.set("source_epochs", "30")?;
    cfg.set("target_epochs", "20")?;
    let (src, tgt) = synthdata::generate(&cfg.data)?;
    let truth = &tgt.sidecar.truth;
    let mut source = Model::<f32>::new(cfg.backbone(), cfg.adm()?, &mut ChaCha8Rng::seed_from_u64(cfg.adapt.seed))?;
    pipeline::train_source(&mut source, &src.images, &src.labels, &cfg.adapt)?;
    let source_acc = pipeline::evaluate(&source, &src.images, &src.labels)?.accuracy;
    let source_only = pipeline::evaluate(&source, &tgt.images, truth)?.accuracy;
    println!("source accuracy {source_acc:.4}, source-only target accuracy {source_only:.4}");

    let mut runs = Vec::new();
    for (name, alpha, beta) in [("baseline", 0.0, 0.0), ("+L_cst", cfg.adapt.weights.alpha, 0.0), ("+L_cst+L_cmk", cfg.adapt.weights.alpha, cfg.adapt.weights.beta)] {
        let run_cfg = pipeline::AdaptConfig {
            weights: LossWeights { alpha, beta },
            ..cfg.adapt.clone()
        };
        runs.push(adapt_run(name, &source, &tgt.images, truth, &run_cfg)?);
    }
    let target_bytes = dataset::target_container(&tgt.images, &tgt.sidecar)?.to_bytes();
    let full = &runs[2].model;
    let checkpoint_bytes = checkpoint::to_container(&full.state, &target_meta(&cfg))?.to_bytes();
    Ok(EndToEnd {
        cfg,
        source_acc,
        source_only,
        runs,
        secs: t.elapsed().as_secs_f64(),
        target_bytes,
        checkpoint_bytes,
    })
}

fn ladder_lines(e: Option<&EndToEnd>) -> Vec<Line> {
    let Some(e) = e else {
        return ["5a", "5b", "5c", "5d"].map(|id| line(id, "end to end", false, "run failed".into())).into();
    };
    let accs: Vec<String> = e.runs.iter().map(|r| format!("{} {:.4}", r.name, r.accuracy)).collect();
    let full = &e.runs[2];
    let gain = 100.0 * (full.accuracy - e.source_only);
    let bad_epochs: Vec<usize> = full.rows.iter().filter(|r| r.epoch > 1 && r.pl_acc_easy < r.pl_acc_all).map(|r| r.epoch).collect();
    let (b, c, m) = (e.runs[0].accuracy, e.runs[1].accuracy, e.runs[2].accuracy);
    let tie = 0.005;
    vec![
        line(
            "5a",
            "source-only target accuracy",
            e.source_only.is_finite(),
            format!("{:.4} (source accuracy {:.4}, total {:.0}s)", e.source_only, e.source_acc, e.secs),
        ),
        line(
            "5b",
            "adaptation gain ≥ 10 points",
            gain >= 10.0 && e.secs < 600.0,
            format!("{:.4} → {:.4} ({gain:+.2} points)", e.source_only, full.accuracy),
        ),
        line(
            "5c",
            "easy-bank labels beat all labels after epoch 1",
            bad_epochs.is_empty() && full.rows.len() == e.cfg.adapt.target_epochs,
            if bad_epochs.is_empty() {
                let worst = full.rows.iter().filter(|r| r.epoch > 1).map(|r| r.pl_acc_easy - r.pl_acc_all).fold(f64::INFINITY, f64::min);
                format!("{} epochs, smallest margin {worst:+.4}", full.rows.len())
            } else {
                format!("violated in epochs {bad_epochs:?}")
            },
        ),
        line(
            "5d",
            "loss ladder is monotone",
            b <= c + tie && c <= m + tie,
            accs.join(", "),
        ),
    ]
}

// ---------------------------------------------------------------------------
// 4. Structural invariants

fn backbone_formula(cfg: &BackboneConfig) -> usize {
    let (d, h, f, c) = (cfg.embed_dim, cfg.mlp_hidden, cfg.feature_dim, cfg.num_classes);
    let tokens = (cfg.image_side / cfg.patch_side).pow(2) + 1;
    let patch = cfg.in_channels * cfg.patch_side * cfg.patch_side;
    let block = 4 * d + 4 * d * (d + 1) + d * h + h + h * d + d;
    patch * d + d + d + tokens * d + cfg.layers * block + 2 * d + f * (d + 1) + c * (f + 1)
}

fn adm_formula(cfg: &AdmConfig) -> usize {
    let mut cin = cfg.in_channels;
    let mut n = 0;
    for conv in &cfg.convs {
        n += conv.out_channels * (cin * conv.kernel * conv.kernel + 3);
        cin = conv.out_channels;
    }
    if cin != cfg.feature_dim {
        n += cfg.feature_dim * (cin + 1);
    }
    n + cfg.head_hidden * (cfg.feature_dim + 1) + cfg.num_classes * (cfg.head_hidden + 1)
}

fn param_ratio() -> (bool, String) {
    let toy = Config::default();
    let cases = [
        ("toy", toy.backbone(), toy.adm().unwrap()),
        ("full", BackboneConfig::full_scale(31), AdmConfig::full_scale(31)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, bb, adm) in cases {
        let specs = Model::<f32>::param_specs(&bb, &adm);
        let group = |g: ParamGroup| specs.iter().filter(|s| s.group == g).map(|s| s.numel()).sum::<usize>();
        let main = group(ParamGroup::Backbone) + group(ParamGroup::Classifier);
        let extra = group(ParamGroup::Adm);
        let ratio = (main + extra) as f64 / main as f64;
        ok &= main == backbone_formula(&bb) && extra == adm_formula(&adm) && ratio <= 1.10;
        parts.push(format!("{name} {extra}/{main} → {ratio:.4}"));
    }
    (ok, parts.join(", "))
}

fn attention_rows(model: &Model<f32>, images: &Tensor<f32>) -> sfda_core::Result<f64> {
    let b = 32.min(images.shape()[0]);
    let per: usize = images.shape()[1..].iter().product();
    let mut shape = images.shape().to_vec();
    shape[0] = b;
    let x = Tensor::new(shape, images.data()[..b * per].to_vec())?;
    let mut tape = Tape::new();
    let bound = model.state.bind(&mut tape);
    let out = model.forward(&mut tape, &bound, &x, ForwardMode::EVAL)?;
    let tokens = *tape.shape(out.attn_probs[0]).last().unwrap();
    let mut worst = 0f64;
    for &p in &out.attn_probs {
        for row in tape.value(p).data().chunks(tokens) {
            worst = worst.max((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    Ok(worst)
}

fn structural(e: Option<&EndToEnd>) -> Vec<Line> {
    let (ratio_ok, ratio_detail) = param_ratio();
    let mut out = Vec::new();
    match e {
        Some(e) => {
            let partition = e.runs.iter().all(|r| r.partition_ok);
            let frozen = e.runs.iter().all(|r| r.frozen_ok);
            let (_, tgt) = synthdata::generate(&e.cfg.data).unwrap();
            let worst = e
                .runs
                .iter()
                .map(|r| attention_rows(&r.model, &tgt.images).unwrap_or(f64::INFINITY))
                .fold(0.0, f64::max);
            let epochs: usize = e.runs.iter().map(|r| r.rows.len()).sum();
            out.push(line("4a", "easy/hard partition", partition, format!("{epochs} epochs: disjoint, covering")));
            out.push(line("4b", "frozen classifier and assistant", frozen, "parameters and buffers bitwise unchanged".into()));
            out.push(line("4c", "attention rows sum to 1", worst <= 1e-6, format!("max deviation {worst:.2e}")));
        }
        None => {
            for id in ["4a", "4b", "4c"] {
                out.push(line(id, "structural invariant", false, "end-to-end run failed".into()));
            }
        }
    }
    out.push(line("4d", "assistant parameter ratio ≤ 1.10", ratio_ok, ratio_detail));
    out
}

// ---------------------------------------------------------------------------
// 6. Determinism

fn small_pipeline() -> sfda_core::Result<(Vec<u8>, String)> {
    let mut cfg = Config::default();
    for (k, v) in [("per_class", "10"), ("source_epochs", "2"), ("target_epochs", "2")] {
        cfg.set(k, v)?;
    }
    let (src, tgt) = synthdata::generate(&cfg.data)?;
    let mut model = Model::<f32>::new(cfg.backbone(), cfg.adm()?, &mut ChaCha8Rng::seed_from_u64(cfg.adapt.seed))?;
    pipeline::train_source(&mut model, &src.images, &src.labels, &cfg.adapt)?;
    let mut rows = Vec::new();
    pipeline::adapt_target(&mut model, &tgt.images, &cfg.adapt, &mut |r| {
        rows.push(r.metrics(&tgt.sidecar.truth));
        Ok(())
    })?;
    let mut bytes = dataset::target_container(&tgt.images, &tgt.sidecar)?.to_bytes();
    bytes.extend(checkpoint::to_container(&model.state, &target_meta(&cfg))?.to_bytes());
    Ok((bytes, metrics::to_csv(&rows)))
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn golden() -> BTreeMap<String, String> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/golden/seed0.sha256");
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .filter_map(|l| l.split_once("  ").map(|(h, n)| (n.trim().to_string(), h.trim().to_string())))
        .collect()
}

fn determinism(e: Option<&EndToEnd>) -> Vec<Line> {
    let repeat = match (small_pipeline(), small_pipeline()) {
        (Ok(a), Ok(b)) => line(
            "6a",
            "repeated runs are byte-identical",
            a == b,
            format!("{} bytes of data and checkpoint, {} bytes of metrics", a.0.len(), a.1.len()),
        ),
        (Err(err), _) | (_, Err(err)) => line("6a", "repeated runs are byte-identical", false, err.to_string()),
    };
    let Some(e) = e else {
        return vec![
            repeat,
            line("6b", "container round trip", false, "end-to-end run failed".into()),
            line("6c", "golden SHA-256", false, "end-to-end run failed".into()),
        ];
    };

    let round_trip = (|| -> sfda_core::Result<bool> {
        let mut ok = true;
        for bytes in [&e.target_bytes, &e.checkpoint_bytes] {
            ok &= Container::from_bytes(bytes)?.to_bytes() == *bytes;
        }
        let restored = checkpoint::from_container::<f32>(&Container::from_bytes(&e.checkpoint_bytes)?)?;
        let bits = |s: &sfda_core::model::ModelState<f32>| -> Vec<u32> {
            s.params().iter().map(|p| &p.value).chain(s.buffers().iter().map(|b| &b.value)).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
        };
        ok &= bits(&restored.state) == bits(&e.runs[2].model.state);
        Ok(ok)
    })();
    let round_trip = match round_trip {
        Ok(ok) => line("6b", "container round trip", ok, "dataset and checkpoint bitwise".into()),
        Err(err) => line("6b", "container round trip", false, err.to_string()),
    };

    let want = golden();
    let got = [("target.cadt", hex(&e.target_bytes)), ("target-adapted.ckpt", hex(&e.checkpoint_bytes))];
    let ok = got.iter().all(|(n, h)| want.get(*n) == Some(h));
    let detail = got.iter().map(|(n, h)| format!("{n} {h}")).collect::<Vec<_>>().join(", ");
    vec![repeat, round_trip, line("6c", "golden SHA-256", ok, detail)]
}
