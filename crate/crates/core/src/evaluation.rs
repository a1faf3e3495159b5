//! Multi-round benchmark with simulated users, slice-selection policy
//! ablation, runtime measurement and report files.

use crate::data::metrics::dsc;
use crate::data::{BinaryImage, BinaryVolume, InteractionType, SegmentationState, SliceMask, Volume};
use crate::engine::{EngineConfig, Models, Session};
use crate::error::{Error, Result};
use crate::interaction_sim::{simulate_with_rng, SimulatorConfig};
use crate::scalar::Real;
use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

/// How the simulated user picks the next slice to annotate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Lowest predicted quality score.
    Quality,
    /// Uniform among non-annotated slices.
    Random,
    /// Lowest true per-slice DSC.
    Oracle,
}

impl SelectionPolicy {
    pub const ALL: [SelectionPolicy; 3] = [SelectionPolicy::Quality, SelectionPolicy::Random, SelectionPolicy::Oracle];

    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionPolicy::Quality => "quality",
            SelectionPolicy::Random => "random",
            SelectionPolicy::Oracle => "oracle",
        }
    }
}

impl FromStr for SelectionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown policy '{s}' (expected quality, random or oracle)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub rounds: usize,
    pub seed: u64,
    pub simulator: SimulatorConfig,
    pub engine: EngineConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            rounds: 6,
            seed: 0,
            simulator: SimulatorConfig::for_resolution(96),
            engine: EngineConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub interaction_type: InteractionType,
    pub policy: SelectionPolicy,
    pub volume: String,
    pub round: usize,
    pub slice: usize,
    pub dsc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub interaction_type: InteractionType,
    pub policy: SelectionPolicy,
    pub rounds: usize,
    pub records: Vec<RoundRecord>,
}

impl BenchmarkReport {
    /// Mean volume DSC for rounds `1..=rounds`.
    pub fn mean_by_round(&self) -> Vec<f64> {
        mean_by_round(&self.records, self.rounds)
    }

    pub fn mean_at(&self, round: usize) -> Option<f64> {
        self.mean_by_round().get(round.checked_sub(1)?).copied()
    }

    /// Volume DSCs at one round, in volume order.
    pub fn dsc_at(&self, round: usize) -> Vec<f64> {
        self.records.iter().filter(|r| r.round == round).map(|r| r.dsc).collect()
    }
}

fn mean_by_round(records: &[RoundRecord], rounds: usize) -> Vec<f64> {
    (1..=rounds)
        .map(|t| {
            let v: Vec<f64> = records.iter().filter(|r| r.round == t).map(|r| r.dsc).collect();
            v.iter().sum::<f64>() / v.len().max(1) as f64
        })
        .collect()
}

fn gt_slice(gt: &BinaryVolume, k: usize) -> BinaryImage {
    gt.slice(s![.., .., k]).to_owned()
}

/// Slice with the most ground-truth foreground, lowest index on ties.
pub fn largest_area_slice(gt: &BinaryVolume) -> usize {
    (0..gt.dim().2)
        .max_by_key(|&k| (gt.slice(s![.., .., k]).iter().filter(|&&x| x > 0).count(), std::cmp::Reverse(k)))
        .unwrap_or(0)
}

/// Non-annotated slice with the lowest true per-slice DSC, lowest index on
/// ties; `None` when every slice is annotated.
pub fn oracle_slice<T: Real>(state: &SegmentationState<T>, gt: &BinaryVolume) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in 0..state.num_slices() {
        if state.annotated_slices.contains(&k) {
            continue;
        }
        let d = dsc(&state.masks[k].binarize(), &gt.slice(s![.., .., k])).unwrap_or(0.0);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

fn random_slice<T: Real, R: Rng>(state: &SegmentationState<T>, rng: &mut R) -> Option<usize> {
    let free: Vec<usize> = (0..state.num_slices()).filter(|k| !state.annotated_slices.contains(k)).collect();
    if free.is_empty() {
        None
    } else {
        Some(free[rng.random_range(0..free.len())])
    }
}

fn stream_seed(master: u64, stream: u64, volume: usize) -> u64 {
    master
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(volume as u64)
}

/// One simulated user round on slice `k`. Slices with no target are
/// confirmed empty instead of guided.
fn user_round<T: Real, R: Rng>(
    sess: &mut Session<T>,
    gt: &BinaryVolume,
    k: usize,
    kind: InteractionType,
    sim: &SimulatorConfig,
    rng: &mut R,
) -> Result<()> {
    let gt_k = gt_slice(gt, k);
    if gt_k.iter().any(|&x| x > 0) {
        let guidance = simulate_with_rng(kind, &gt_k, sim, rng)?.with_slice_index(k);
        sess.refine_round(&guidance)?;
    } else {
        let (h, w) = gt_k.dim();
        let empty = SliceMask::new(Array2::zeros((h, w)), k, 0)?;
        sess.refine_with_mask(k, empty)?;
    }
    Ok(())
}

/// Run `cfg.rounds` simulated rounds on every volume.
pub fn run_benchmark<T: Real>(
    models: &Arc<Models<T>>,
    volumes: &[(Volume<T>, BinaryVolume)],
    kind: InteractionType,
    policy: SelectionPolicy,
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    if cfg.rounds == 0 {
        return Err(Error::arg("rounds must be at least 1"));
    }
    if !models.interaction.contains_key(&kind) {
        return Err(Error::Config(format!("no interaction network loaded for {kind}")));
    }
    cfg.simulator.validate()?;
    let mut records = Vec::new();
    for (vi, (v, gt)) in volumes.iter().enumerate() {
        if gt.dim() != v.voxels().dim() {
            return Err(Error::arg(format!("ground truth of volume {vi} does not match its shape")));
        }
        let mut guide_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 1, vi));
        let mut pick_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, 2, vi));
        let mut sess = Session::new(v.clone(), models.clone(), cfg.engine.clone())?;
        let mut next = Some(largest_area_slice(gt));
        for t in 1..=cfg.rounds {
            let slice = match next {
                Some(k) => {
                    user_round(&mut sess, gt, k, kind, &cfg.simulator, &mut guide_rng)?;
                    k
                }
                // Every slice annotated: the state no longer changes.
                None => records.last().map_or(0, |r: &RoundRecord| r.slice),
            };
            records.push(RoundRecord {
                interaction_type: kind,
                policy,
                volume: v.identifier().to_string(),
                round: t,
                slice,
                dsc: dsc(&sess.state().binary_volume(), gt)?,
            });
            next = match policy {
                SelectionPolicy::Quality => sess.suggest_next_slice(),
                SelectionPolicy::Random => random_slice(sess.state(), &mut pick_rng),
                SelectionPolicy::Oracle => oracle_slice(sess.state(), gt),
            };
        }
    }
    Ok(BenchmarkReport {
        interaction_type: kind,
        policy,
        rounds: cfg.rounds,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub shape: [usize; 3],
    pub median_seconds: f64,
    pub runs: Vec<f64>,
    pub hardware: String,
}

/// Short description of the machine the timings come from.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| std::env::consts::ARCH.to_string());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{cpu}; {threads} hardware threads; {}", std::env::consts::OS)
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Wall-clock seconds of one full round (initialize + propagate) in a fresh
/// session: one warm-up run, then the median of `repetitions` timed runs.
pub fn measure_runtime<T: Real>(
    models: &Arc<Models<T>>,
    volume: &Volume<T>,
    guidance: &crate::data::GuidanceMap,
    repetitions: usize,
) -> Result<RuntimeReport> {
    let reps = repetitions.max(3);
    let run = || -> Result<f64> {
        let mut sess = Session::new(volume.clone(), models.clone(), EngineConfig::default())?;
        let start = Instant::now();
        sess.refine_round(guidance)?;
        Ok(start.elapsed().as_secs_f64())
    };
    run()?;
    let runs = (0..reps).map(|_| run()).collect::<Result<Vec<_>>>()?;
    let (h, w, c) = volume.dim();
    Ok(RuntimeReport {
        shape: [h, w, c],
        median_seconds: median(&runs),
        runs,
        hardware: hardware_descriptor(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub interaction_type: InteractionType,
    pub policy: SelectionPolicy,
    pub volumes: usize,
    pub mean_dsc_by_round: Vec<f64>,
    pub headline_round: usize,
    pub headline_dsc: Option<f64>,
}

/// Round reported as the headline number.
pub const HEADLINE_ROUND: usize = 6;

pub fn summarize(records: &[RoundRecord]) -> Vec<SeriesSummary> {
    let mut series: BTreeMap<(InteractionType, SelectionPolicy), Vec<RoundRecord>> = BTreeMap::new();
    for r in records {
        series.entry((r.interaction_type, r.policy)).or_default().push(r.clone());
    }
    series
        .into_iter()
        .map(|((kind, policy), recs)| {
            let rounds = recs.iter().map(|r| r.round).max().unwrap_or(0);
            let means = mean_by_round(&recs, rounds);
            let mut vols: Vec<&str> = recs.iter().map(|r| r.volume.as_str()).collect();
            vols.sort_unstable();
            vols.dedup();
            SeriesSummary {
                interaction_type: kind,
                policy,
                volumes: vols.len(),
                headline_dsc: means.get(HEADLINE_ROUND - 1).copied(),
                mean_dsc_by_round: means,
                headline_round: HEADLINE_ROUND,
            }
        })
        .collect()
}

pub fn read_records_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// DSC-vs-round curves, one polyline per (interaction type, policy).
pub fn plot_svg(records: &[RoundRecord]) -> String {
    let series = summarize(records);
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let max_round = series.iter().map(|s| s.mean_dsc_by_round.len()).max().unwrap_or(1).max(2);
    let lo = series
        .iter()
        .flat_map(|s| s.mean_dsc_by_round.iter().copied())
        .fold(1.0f64, f64::min)
        .min(0.9);
    let lo = (lo * 20.0).floor() / 20.0;
    let x = |r: usize| pad + (r - 1) as f64 / (max_round - 1) as f64 * (w - 2.0 * pad);
    let y = |d: f64| h - pad - (d - lo) / (1.0 - lo) * (h - 2.0 * pad);
    let mut out = String::new();
    let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" fill="none" stroke="black"/>"#,
        h - pad,
        w - pad
    );
    for r in 1..=max_round {
        let _ = writeln!(out, r#"<text x="{:.1}" y="{}" text-anchor="middle">{r}</text>"#, x(r), h - pad + 16.0);
    }
    let steps = ((1.0 - lo) / 0.05).round() as usize;
    for i in 0..=steps {
        let d = lo + i as f64 * 0.05;
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{d:.2}</text>"#, pad - 6.0, y(d) + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">round</text>"#, w / 2.0, h - 10.0);
    let _ = writeln!(out, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mean DSC</text>"#, h / 2.0, h / 2.0);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .mean_dsc_by_round
            .iter()
            .enumerate()
            .map(|(r, &d)| format!("{:.1},{:.1}", x(r + 1), y(d)))
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{color}">{} / {}</text>"#,
            pad + 10.0,
            pad + 14.0 * (i + 1) as f64,
            s.interaction_type,
            s.policy.as_str()
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Paths written by `emit_report`.
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub svg: PathBuf,
}

/// Write `dsc.csv`, `summary.json` and `dsc_curve.svg` into `dir`. The plot
/// is drawn from the CSV as written.
pub fn emit_report(reports: &[BenchmarkReport], dir: &Path) -> Result<ReportFiles> {
    let records: Vec<RoundRecord> = reports.iter().flat_map(|r| r.records.iter().cloned()).collect();
    if records.is_empty() {
        return Err(Error::arg("nothing to report"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("dsc.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
        for r in &records {
            w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
    }
    let written = read_records_csv(&csv_path)?;
    let json_path = dir.join("summary.json");
    let summary = serde_json::to_string_pretty(&summarize(&written)).expect("summary serializes");
    std::fs::write(&json_path, summary + "\n").map_err(|e| Error::io(&json_path, e))?;
    let svg_path = dir.join("dsc_curve.svg");
    std::fs::write(&svg_path, plot_svg(&written)).map_err(|e| Error::io(&svg_path, e))?;
    Ok(ReportFiles {
        csv: csv_path,
        json: json_path,
        svg: svg_path,
    })
}
