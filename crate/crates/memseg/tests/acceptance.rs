//! Acceptance suite. Every criterion runs in sequence inside one test so
//! the timed stages (training, runtime) never share the CPU with each
//! other, and each prints one PASS/FAIL line.
//!
//! Trains the desk preset from scratch; expect roughly 25 minutes on one
//! core in release mode.

mod common;

use memseg_core::config::PipelineConfig;
use memseg_core::data::io::load_raw_mask;
use memseg_core::data::metrics::pearson;
use memseg_core::data::{BinaryImage, InteractionType};
use memseg_core::evaluation::{largest_area_slice, measure_runtime, run_benchmark, BenchmarkReport, SelectionPolicy};
use memseg_core::interaction_sim::{simulate, SimulatorConfig};
use memseg_core::memory_net::{memory_read, EncodedCell, MemoryBank};
use memseg_core::nn::{ConvGeom, Graph, ParamId, ParamSet, Tensor};
use memseg_core::training::pipeline::{test_volumes, train_all, training_volumes};
use memseg_core::training::quality::{collect_quality_data, quality_predictions};
use memseg_core::training::synthetic::{generate_synthetic_volume, SyntheticVolumeSpec};
use memseg_core::Models32;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::Client;
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- oracles

const EPS: f64 = 1e-8;

/// Naive read over every (memory location, query location) pair.
fn oracle_read(keys: &[Vec<f64>], values: &[Vec<f64>], query: &[f64], ck: usize, cv: usize, hw: usize) -> Vec<f64> {
    let norm = |v: &[f64], loc: usize| (0..ck).map(|c| v[c * hw + loc].powi(2)).sum::<f64>().sqrt() + EPS;
    let mut out = vec![0.0; cv * hw];
    for q in 0..hw {
        let qn = norm(query, q);
        let mut sims = Vec::new();
        for key in keys {
            for p in 0..hw {
                let kn = norm(key, p);
                sims.push((0..ck).map(|c| key[c * hw + p] / kn * query[c * hw + q] / qn).sum::<f64>());
            }
        }
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = sims.iter().map(|s| (s - m).exp()).sum();
        for (j, value) in values.iter().enumerate() {
            for p in 0..hw {
                let w = (sims[j * hw + p] - m).exp() / z;
                for c in 0..cv {
                    out[c * hw + q] += w * value[c * hw + p];
                }
            }
        }
    }
    out
}

struct Instance {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    query: Vec<f64>,
    ck: usize,
    cv: usize,
    side: usize,
}

/// Random bank of `n` cells for feature width `c`: keys carry `c/8`
/// channels and values `c/2`.
fn instance(rng: &mut ChaCha8Rng, n: usize, side: usize, c: usize) -> Instance {
    let (ck, cv, hw) = (c / 8, c / 2, side * side);
    let mut vec = |len: usize| (0..len).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<f64>>();
    let keys = (0..n).map(|_| vec(ck * hw)).collect();
    let values = (0..n).map(|_| vec(cv * hw)).collect();
    let query = vec(ck * hw);
    Instance {
        keys,
        values,
        query,
        ck,
        cv,
        side,
    }
}

impl Instance {
    fn read(&self) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.side, self.side);
        let cells = self
            .keys
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(j, (k, v))| EncodedCell {
                slice_index: j,
                key: Tensor::from_vec(&[self.ck, h, w], k.clone()),
                value: Tensor::from_vec(&[self.cv, h, w], v.clone()),
            })
            .collect();
        let bank = MemoryBank::from_cells(cells).unwrap();
        let (out, weights) = memory_read(&bank, &Tensor::from_vec(&[self.ck, h, w], self.query.clone())).unwrap();
        (out.into_data(), weights)
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// --------------------------------------------------------- criteria 1 - 3

fn memory_read_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let worst = (0..100)
        .map(|_| {
            let inst = instance(&mut rng, 3, 4, 16);
            let want = oracle_read(&inst.keys, &inst.values, &inst.query, inst.ck, inst.cv, 16);
            max_abs_diff(&inst.read().0, &want)
        })
        .fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-5 && secs < 10.0,
        format!("100 instances, max |diff| {worst:.2e} (< 1e-5), {secs:.3}s (< 10s)"),
    )
}

fn attention_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut col, mut perm, mut scale) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let inst = instance(&mut rng, 3, 4, 16);
        let hw = 16;
        let (out, w) = inst.read();
        for q in 0..hw {
            let s: f64 = w.iter().skip(q).step_by(hw).sum();
            col = col.max((s - 1.0).abs());
        }
        let mut p = Instance {
            keys: inst.keys.clone(),
            values: inst.values.clone(),
            query: inst.query.clone(),
            ..inst
        };
        p.keys.rotate_left(1);
        p.values.rotate_left(1);
        p.keys.swap(0, 1);
        p.values.swap(0, 1);
        perm = perm.max(max_abs_diff(&out, &p.read().0));
        // One positive factor per key location, memory and query alike.
        let mut factor = || rng.random_range(0.05..20.0);
        let mut scaled = |v: &[f64]| -> Vec<f64> {
            let f: Vec<f64> = (0..hw).map(|_| factor()).collect();
            v.iter().enumerate().map(|(i, x)| x * f[i % hw]).collect()
        };
        let sk = Instance {
            keys: p.keys.iter().map(|k| scaled(k)).collect(),
            query: scaled(&p.query),
            values: p.values.clone(),
            ..p
        };
        scale = scale.max(max_abs_diff(&out, &sk.read().0));
    }
    verdict(
        col < 1e-6 && perm < 1e-6 && scale < 1e-6,
        format!("column sums {col:.1e}, permutation {perm:.1e}, key scaling {scale:.1e} (each < 1e-6)"),
    )
}

type LossFn<'a> = dyn Fn(&ParamSet<f64>, bool) -> (f64, Option<memseg_core::nn::Grads<f64>>) + 'a;

/// Worst relative error between tape gradients and central differences.
/// The step is about the cube root of f64 epsilon; smaller steps drown the
/// ~1e-9 key gradients of single-channel keys in rounding noise.
fn worst_gradient_error(ps: &mut ParamSet<f64>, loss: &LossFn<'_>) -> f64 {
    let grads = loss(ps, true).1.unwrap();
    let h = 1e-5;
    let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
    let mut worst = 0.0f64;
    for id in ids {
        for j in 0..ps.get(id).len() {
            let orig = ps.get(id).data()[j];
            ps.get_mut(id).data_mut()[j] = orig + h;
            let lp = loss(ps, false).0;
            ps.get_mut(id).data_mut()[j] = orig - h;
            let lm = loss(ps, false).0;
            ps.get_mut(id).data_mut()[j] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.data()[j]);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
    }
    worst
}

fn read_gradient_error(c: usize, rng: &mut ChaCha8Rng) -> f64 {
    let (ck, cv) = (c / 8, c / 2);
    let mut ps = ParamSet::<f64>::new();
    let keys: Vec<ParamId> = (0..2).map(|j| ps.add_he(format!("k{j}"), &[ck, 2, 2], 1, rng)).collect();
    let values: Vec<ParamId> = (0..2).map(|j| ps.add_he(format!("v{j}"), &[cv, 2, 2], 1, rng)).collect();
    let q = ps.add_he("q", &[ck, 2, 2], 1, rng);
    let probe = Tensor::from_vec(&[cv, 2, 2], (0..cv * 4).map(|i| ((i as f64) * 0.7).sin()).collect());
    worst_gradient_error(&mut ps, &|ps, grad| {
        let mut g = Graph::training(ps);
        let ks: Vec<_> = keys.iter().map(|&k| g.param(k)).collect();
        let vs: Vec<_> = values.iter().map(|&v| g.param(v)).collect();
        let qn = g.param(q);
        let r = g.memory_read(&ks, &vs, qn);
        let l = g.value(r).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        (l, grad.then(|| g.backward_seeded(r, probe.clone())))
    })
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Memory read at N=2, H=W=2 for C=8 (1 key channel, 4 value channels)
    // and C=64, where key gradients are not vanishingly small.
    let read_err = [8usize, 64].iter().map(|&c| read_gradient_error(c, &mut rng)).fold(0.0, f64::max);

    // Per-pixel cross-entropy on a 4x4 toy: conv logits against a mask.
    let mut ps = ParamSet::<f64>::new();
    let w = ps.add_he("w", &[1, 2, 3, 3], 18, &mut rng);
    let b = ps.add_zeros("b", &[1]);
    let x = Tensor::from_vec(&[2, 4, 4], (0..32).map(|i| ((i as f64) * 0.41).cos()).collect());
    let target = Tensor::from_vec(&[1, 4, 4], (0..16).map(|i| f64::from(u8::from(i % 5 < 2))).collect());
    let ce_err = worst_gradient_error(&mut ps, &|ps, grad| {
        let mut g = Graph::training(ps);
        let xi = g.input(x.clone());
        let logits = g.conv2d(xi, w, Some(b), ConvGeom::same3(1));
        let loss = g.bce_with_logits(logits, &target);
        let v = g.value(loss).data()[0];
        (v, grad.then(|| g.backward(loss)))
    });
    let secs = start.elapsed().as_secs_f64();
    verdict(
        read_err < 1e-3 && ce_err < 1e-3 && secs < 1.0,
        format!("memory read (C=8, C=64) rel err {read_err:.1e}, cross-entropy rel err {ce_err:.1e} (< 1e-3), {secs:.3}s (< 1s)"),
    )
}

// ------------------------------------------------- trained-model criteria

struct Trained {
    cfg: PipelineConfig,
    models: Arc<Models32>,
    train_seconds: f64,
    n_train: usize,
    reports: BTreeMap<(InteractionType, SelectionPolicy), BenchmarkReport>,
    n_test: usize,
}

fn train_and_benchmark() -> Trained {
    let cfg = PipelineConfig::preset("desk").unwrap();
    let train = training_volumes::<f32>(&cfg).unwrap();
    let run = train_all(&cfg, &InteractionType::ALL, &train).unwrap();
    let train_seconds = run.total_seconds();
    eprintln!("trained desk preset in {train_seconds:.0}s: {:?}", run.seconds);
    let models = Arc::new(run.models);
    let test = test_volumes::<f32>(&cfg).unwrap();
    let bcfg = cfg.benchmark_config();
    let mut reports = BTreeMap::new();
    for kind in InteractionType::ALL {
        for policy in SelectionPolicy::ALL {
            let r = run_benchmark(&models, &test, kind, policy, &bcfg).unwrap();
            eprintln!("{kind} {}: {:?}", policy.as_str(), r.mean_by_round());
            reports.insert((kind, policy), r);
        }
    }
    Trained {
        n_train: train.len(),
        n_test: test.len(),
        cfg,
        models,
        train_seconds,
        reports,
    }
}

fn end_to_end(t: &Trained) -> Verdict {
    let mut ok = t.train_seconds < 1800.0 && t.n_train >= 50;
    let mut parts = vec![format!("trained on {} volumes in {:.1} min (< 30)", t.n_train, t.train_seconds / 60.0)];
    for kind in InteractionType::ALL {
        let r = &t.reports[&(kind, SelectionPolicy::Quality)];
        let (r1, r6) = (r.mean_at(1).unwrap(), r.mean_at(6).unwrap());
        ok &= r1 > 0.80 && r6 > 0.85;
        parts.push(format!("{kind} round1 {r1:.4} (> 0.80) round6 {r6:.4} (> 0.85)"));
    }
    verdict(ok, format!("{}; {} held-out volumes", parts.join("; "), t.n_test))
}

fn policy_ordering(t: &Trained) -> Verdict {
    let mut ok = t.n_test >= 20;
    let mut parts = Vec::new();
    for kind in InteractionType::ALL {
        let at6 = |p| t.reports[&(kind, p)].mean_at(6).unwrap();
        let (o, q, r) = (at6(SelectionPolicy::Oracle), at6(SelectionPolicy::Quality), at6(SelectionPolicy::Random));
        ok &= o >= q && q >= r && q - r > 0.0;
        parts.push(format!("{kind} oracle {o:.4} >= quality {q:.4} >= random {r:.4}"));
    }
    // Same master seed, same records.
    let test = test_volumes::<f32>(&t.cfg).unwrap();
    let again = run_benchmark(&t.models, &test, InteractionType::Scribble, SelectionPolicy::Random, &t.cfg.benchmark_config()).unwrap();
    let same = again == t.reports[&(InteractionType::Scribble, SelectionPolicy::Random)];
    ok &= same;
    parts.push(format!("rerun reproducible: {same}"));
    verdict(ok, parts.join("; "))
}

fn multi_round_trend(t: &Trained) -> Verdict {
    let mut worst = f64::INFINITY;
    let mut at = String::new();
    for ((kind, policy), r) in &t.reports {
        let m = r.mean_by_round();
        for (i, pair) in m.windows(2).enumerate() {
            let step = pair[1] - pair[0];
            if step < worst {
                worst = step;
                at = format!("{kind}/{} round {}->{}", policy.as_str(), i + 1, i + 2);
            }
        }
    }
    verdict(
        worst >= -0.01,
        format!("smallest step {worst:+.4} at {at} over {} series (>= -0.01)", t.reports.len()),
    )
}

fn quality_fidelity(t: &Trained) -> Verdict {
    let test = test_volumes::<f32>(&t.cfg).unwrap();
    let groups = collect_quality_data(&t.models.memory, &test, &t.cfg.quality, t.cfg.seed ^ 0x5eed).unwrap();
    let (pred, target) = quality_predictions(&t.models.memory, &groups).unwrap();
    let r = pearson(&pred, &target);
    verdict(r > 0.6, format!("Pearson {r:.3} over {} held-out masks incl. corrupted (> 0.6)", pred.len()))
}

fn runtime(t: &Trained) -> Verdict {
    let spec = SyntheticVolumeSpec {
        shape: [128, 128, 100],
        seed: 77,
        ..t.cfg.data.spec.clone()
    };
    let (vol, gt) = generate_synthetic_volume(&spec).unwrap();
    let k = largest_area_slice(&gt);
    let gt_k = gt.slice(s![.., .., k]).to_owned();
    let guidance = simulate(InteractionType::BoundingBox, &gt_k, &t.cfg.simulator).unwrap().with_slice_index(k);
    let rep = measure_runtime(&t.models, &vol.cast::<f32>(), &guidance, 3).unwrap();
    verdict(
        rep.median_seconds < 60.0,
        format!("median {:.2}s of {:?} (< 60s) on {}", rep.median_seconds, rep.runs, rep.hardware),
    )
}

fn cli_api_parity(t: &Trained) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let weights = dir.path().join("weights");
    t.models.save_dir(&weights).unwrap();
    let server = common::ServeProcess::start(&weights, &[]);
    let client = Client::new();
    let cases = [
        json!({ "slice_index": 9, "type": "scribble", "geometry": { "points": [[40, 35], [46, 48], [50, 55]] } }),
        json!({ "slice_index": 12, "type": "bounding_box", "geometry": { "corners": [[30, 28], [66, 70]] } }),
        json!({ "slice_index": 7, "type": "extreme_points", "geometry": { "points": [[31, 48], [48, 67], [65, 47], [47, 29]] }, "thickness": 5 }),
    ];
    let mut identical = 0;
    for (i, g) in cases.iter().enumerate() {
        let seed = 900 + i as u64;
        let gpath = dir.path().join(format!("g{i}.json"));
        std::fs::write(&gpath, g.to_string()).unwrap();
        let out = dir.path().join(format!("cli{i}"));
        let st = Command::new(env!("CARGO_BIN_EXE_memseg"))
            .args(["segment", "--synthetic", &seed.to_string(), "--weights"])
            .arg(&weights)
            .arg("--guidance")
            .arg(&gpath)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
        let cli = std::fs::read(out.join("mask.raw")).unwrap();

        let created: Value = client
            .post(format!("{}/sessions", server.url))
            .json(&json!({ "synthetic": { "seed": seed } }))
            .send()
            .unwrap()
            .json()
            .unwrap();
        let base = format!("{}/sessions/{}", server.url, created["session_id"].as_str().unwrap());
        assert_eq!(client.post(format!("{base}/guidance")).json(g).send().unwrap().status(), 200);
        let api = client.get(format!("{base}/mask")).send().unwrap().bytes().unwrap();
        let nonempty = load_raw_mask(&out.join("mask.raw")).unwrap().iter().any(|&v| v == 1);
        if cli == api.to_vec() && nonempty {
            identical += 1;
        }
    }
    verdict(identical == cases.len(), format!("{identical}/{} guidance types bit-identical", cases.len()))
}

// ------------------------------------------------------------ criterion 8

/// Union of random ellipses on an `n x n` slice.
fn blob(n: usize, rng: &mut ChaCha8Rng) -> BinaryImage {
    let parts: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(1..4))
        .map(|_| {
            let margin = 6.0;
            (
                rng.random_range(margin..n as f64 - margin),
                rng.random_range(margin..n as f64 - margin),
                rng.random_range(1.0..20.0),
                rng.random_range(1.0..20.0),
            )
        })
        .collect();
    Array2::from_shape_fn((n, n), |(y, x)| {
        u8::from(parts.iter().any(|&(cy, cx, ry, rx)| ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2) <= 1.0))
    })
}

fn simulator_sweep() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut subset_fail, mut cover_fail, mut nondet) = (0, 0, 0);
    let mut min_cover = 1.0f64;
    let mut cases = 0;
    while cases < 1000 {
        let gt = blob(96, &mut rng);
        let total = gt.iter().filter(|&&v| v == 1).count();
        if total == 0 {
            continue;
        }
        cases += 1;
        let cfg = SimulatorConfig::for_resolution(96).with_seed(rng.random());
        for kind in InteractionType::ALL {
            let g = simulate(kind, &gt, &cfg).unwrap();
            if g != simulate(kind, &gt, &cfg).unwrap() {
                nondet += 1;
            }
            let inside = g.pixels().iter().zip(gt.iter()).filter(|(&a, &v)| a == 1 && v == 1).count();
            match kind {
                InteractionType::BoundingBox => {
                    let cover = inside as f64 / total as f64;
                    min_cover = min_cover.min(cover);
                    cover_fail += usize::from(cover < 0.9);
                }
                _ => subset_fail += usize::from(g.pixels().iter().zip(gt.iter()).any(|(&a, &v)| a > v)),
            }
        }
    }
    verdict(
        subset_fail == 0 && cover_fail == 0 && nondet == 0,
        format!(
            "{cases} cases: {subset_fail} scribble/extreme outside foreground, {cover_fail} boxes under 90% (min {min_cover:.3}), {nondet} nondeterministic"
        ),
    )
}

// ----------------------------------------------------------------- runner

/// Straight to the process stdout, so the lines show up without
/// `--nocapture`.
fn emit(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

#[test]
fn acceptance() {
    let mut lines = Vec::new();
    let mut check = |name: &str, f: &mut dyn FnMut() -> Verdict| {
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        let line = format!("[{}] {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
        emit(&line);
        lines.push((v.passed, line));
    };
    check("memory-read oracle equivalence", &mut memory_read_oracle);
    check("attention invariants", &mut attention_invariants);
    check("gradient checks", &mut gradient_checks);
    check("simulator properties", &mut simulator_sweep);
    let trained = catch_unwind(train_and_benchmark).ok();
    let trained_checks: [(&str, fn(&Trained) -> Verdict); 6] = [
        ("end-to-end synthetic benchmark", end_to_end),
        ("selection-policy ordering", policy_ordering),
        ("multi-round trend", multi_round_trend),
        ("quality-head fidelity", quality_fidelity),
        ("runtime sanity", runtime),
        ("CLI/API parity", cli_api_parity),
    ];
    for (name, f) in trained_checks {
        match &trained {
            Some(t) => check(name, &mut || f(t)),
            None => check(name, &mut || verdict(false, "desk training or benchmarking failed")),
        }
    }
    emit("\nacceptance summary");
    for (_, line) in &lines {
        emit(line);
    }
    let failed: Vec<&String> = lines.iter().filter(|(p, _)| !p).map(|(_, l)| l).collect();
    assert!(failed.is_empty(), "{} criteria failed", failed.len());
}
