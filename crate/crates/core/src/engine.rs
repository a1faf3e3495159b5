//! Interactive session: initialize the guided slice, propagate through the
//! volume with the memory network, and route the user to the worst slice.

use crate::data::{GuidanceMap, InteractionType, SegmentationState, SliceMask, Volume};
use crate::error::{Error, Result};
use crate::interaction_net::{InteractionInput, InteractionNet};
use crate::memory_net::{EncodedCell, MemoryBank, MemoryCell, MemoryNet, MemoryReadOutput};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// A snapshot cell is kept every `memory_interval` slices from the
    /// interactive slice.
    pub memory_interval: usize,
    pub max_rounds: usize,
    pub binarize_threshold: f64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            memory_interval: 5,
            max_rounds: 16,
            binarize_threshold: 0.5,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_interval == 0 || self.max_rounds == 0 {
            return Err(Error::Config("memory_interval and max_rounds must be at least 1".into()));
        }
        if self.binarize_threshold != crate::data::BINARIZE_THRESHOLD {
            return Err(Error::Config("binarize_threshold is fixed at 0.5".into()));
        }
        Ok(())
    }
}

/// Pass direction away from the interactive slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Slice indices of the query memory for slice `k`, propagating from the
/// interactive slice `i`: the annotated slices (`annotated[0]` should be
/// `i`), the snapshots `i ± N, i ± 2N, ...` strictly between `i` and `k`,
/// then the previous slice; first occurrence wins.
pub fn memory_indices(annotated: &[usize], i: usize, k: usize, interval: usize) -> Result<Vec<usize>> {
    if k == i {
        return Err(Error::arg("the interactive slice cannot query itself"));
    }
    let mut out: Vec<usize> = Vec::new();
    let add = |j: usize, out: &mut Vec<usize>| {
        if !out.contains(&j) {
            out.push(j);
        }
    };
    for &a in annotated {
        add(a, &mut out);
    }
    add(i, &mut out);
    if k > i {
        let mut j = i + interval;
        while j < k {
            add(j, &mut out);
            j += interval;
        }
        add(k - 1, &mut out);
    } else {
        let mut j = i as isize - interval as isize;
        while j > k as isize {
            add(j as usize, &mut out);
            j -= interval as isize;
        }
        add(k + 1, &mut out);
    }
    Ok(out)
}

/// Argmin of the quality scores over non-annotated slices, lowest index on
/// ties; `None` once every slice is annotated.
pub fn suggest_next_slice<T>(state: &SegmentationState<T>) -> Option<usize> {
    state
        .quality_scores
        .iter()
        .enumerate()
        .filter(|(k, _)| !state.annotated_slices.contains(k))
        .fold(None, |best: Option<(usize, f64)>, (k, &q)| match best {
            Some((_, bq)) if bq <= q => best,
            _ => Some((k, q)),
        })
        .map(|(k, _)| k)
}

/// Frozen networks shared by every session.
pub struct Models<T> {
    pub interaction: BTreeMap<InteractionType, InteractionNet<T>>,
    pub memory: MemoryNet<T>,
}

impl<T: Real> Models<T> {
    pub fn interaction_path(dir: &Path, kind: InteractionType) -> PathBuf {
        dir.join(format!("interaction_{}.safetensors", kind.as_str()))
    }

    pub fn memory_path(dir: &Path) -> PathBuf {
        dir.join("memory.safetensors")
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (kind, net) in &self.interaction {
            net.save(&Self::interaction_path(dir, *kind))?;
        }
        self.memory.save(&Self::memory_path(dir))
    }

    /// Load the memory network and whichever interaction networks exist.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mem_path = Self::memory_path(dir);
        if !mem_path.exists() {
            return Err(Error::Config(format!("no memory network weights at {}", mem_path.display())));
        }
        let memory = MemoryNet::load(&mem_path)?;
        let mut interaction = BTreeMap::new();
        for kind in InteractionType::ALL {
            let p = Self::interaction_path(dir, kind);
            if p.exists() {
                interaction.insert(kind, InteractionNet::load(&p)?);
            }
        }
        if interaction.is_empty() {
            return Err(Error::Config(format!("no interaction network weights in {}", dir.display())));
        }
        Ok(Self { interaction, memory })
    }

    fn interaction_net(&self, kind: InteractionType) -> Result<&InteractionNet<T>> {
        self.interaction
            .get(&kind)
            .ok_or_else(|| Error::Config(format!("no interaction network loaded for {kind}")))
    }
}

/// Per-slice output of one propagation step.
pub struct SliceResult<T> {
    pub mask: SliceMask<T>,
    pub quality: f64,
    pub read: MemoryReadOutput<T>,
}

pub struct Session<T> {
    volume: Volume<T>,
    state: SegmentationState<T>,
    config: EngineConfig,
    models: Arc<Models<T>>,
    /// Annotated slices in the order they were annotated.
    annotation_order: Vec<usize>,
}

impl<T: Real> Session<T> {
    pub fn new(volume: Volume<T>, models: Arc<Models<T>>, config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let (h, w, c) = volume.dim();
        Ok(Self {
            volume,
            state: SegmentationState::fresh(h, w, c),
            config,
            models,
            annotation_order: Vec::new(),
        })
    }

    pub fn state(&self) -> &SegmentationState<T> {
        &self.state
    }

    pub fn volume(&self) -> &Volume<T> {
        &self.volume
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn models(&self) -> &Arc<Models<T>> {
        &self.models
    }

    fn check_slice(&self, k: usize) -> Result<()> {
        let c = self.volume.num_slices();
        if k >= c {
            return Err(Error::arg(format!("slice index {k} out of range for {c} slices")));
        }
        Ok(())
    }

    fn pin(&mut self, k: usize, mut mask: SliceMask<T>) {
        mask.slice_index = k;
        mask.round = self.state.round;
        self.state.masks[k] = mask;
        self.state.quality_scores[k] = 1.0;
        self.state.annotated_slices.insert(k);
        self.annotation_order.retain(|&j| j != k);
        self.annotation_order.push(k);
    }

    /// Segment the guided slice with the interaction network and pin it.
    pub fn initialize(&mut self, guidance: &GuidanceMap) -> Result<&SegmentationState<T>> {
        let k = guidance.slice_index();
        self.check_slice(k)?;
        let (h, w, _) = self.volume.dim();
        if guidance.dim() != (h, w) {
            return Err(Error::arg(format!("guidance {:?} does not match slice size {:?}", guidance.dim(), (h, w))));
        }
        let net = self.models.interaction_net(guidance.interaction_type())?;
        let input = InteractionInput::new(
            self.volume.slice_owned(k),
            self.state.masks[k].probabilities.clone(),
            guidance.clone(),
        )?;
        let mask = net.segment(&input)?;
        self.pin(k, mask);
        Ok(&self.state)
    }

    /// Pin a given mask on slice `k` as if it came from the interaction
    /// network (used to seed propagation from ground truth).
    pub fn annotate_with_mask(&mut self, k: usize, mask: SliceMask<T>) -> Result<()> {
        self.check_slice(k)?;
        if mask.dim() != self.state.masks[k].dim() {
            return Err(Error::arg("annotation mask does not match slice size"));
        }
        self.pin(k, mask);
        Ok(())
    }

    fn encode_cell(&self, k: usize, mask: &SliceMask<T>) -> Result<EncodedCell<T>> {
        let cell = MemoryCell::new(k, self.volume.slice_owned(k), mask.clone())?;
        self.models.memory.encode_memory(&cell)
    }

    /// Memory bank for query `k` propagating from `i`, built from encoded
    /// cells of the annotated slices and of the current pass.
    pub fn build_query_memory(
        &self,
        i: usize,
        k: usize,
        annotated: &HashMap<usize, EncodedCell<T>>,
        pass: &HashMap<usize, EncodedCell<T>>,
    ) -> Result<MemoryBank<T>> {
        let mut order = vec![i];
        order.extend(self.annotation_order.iter().copied().filter(|&j| j != i));
        let idx = memory_indices(&order, i, k, self.config.memory_interval)?;
        let cells = idx
            .iter()
            .map(|j| {
                annotated
                    .get(j)
                    .or_else(|| pass.get(j))
                    .cloned()
                    .ok_or_else(|| Error::arg(format!("slice {j} has not been segmented in this pass")))
            })
            .collect::<Result<Vec<_>>>()?;
        MemoryBank::from_cells(cells)
    }

    /// Segment slice `k` from a memory bank.
    pub fn segment_from_memory(&self, bank: &MemoryBank<T>, k: usize, keep_weights: bool) -> Result<SliceResult<T>> {
        let mem = &self.models.memory;
        let query = mem.encode_query(self.volume.slice(k))?;
        let read = mem.read(bank, &query, keep_weights)?;
        let mut mask = mem.decode_segmentation(&read.fused, &query, k)?;
        mask.round = self.state.round;
        let quality = mem.assess_quality(&read.fused, &mask)?;
        Ok(SliceResult { mask, quality, read })
    }

    /// Propagate forward and backward from the interactive slice `i`. Each
    /// pass keeps its own memory; annotated slices are never overwritten.
    pub fn propagate(&mut self, i: usize) -> Result<&SegmentationState<T>> {
        self.propagate_observed(i, |_, _| {})
    }

    /// `propagate`, handing every segmented slice to `observe` before its
    /// mask is stored.
    pub fn propagate_observed(
        &mut self,
        i: usize,
        mut observe: impl FnMut(usize, &SliceResult<T>),
    ) -> Result<&SegmentationState<T>> {
        self.check_slice(i)?;
        if !self.state.annotated_slices.contains(&i) {
            return Err(Error::arg(format!("slice {i} has not been initialized")));
        }
        let c = self.volume.num_slices();
        let mut annotated = HashMap::new();
        for &j in &self.annotation_order {
            annotated.insert(j, self.encode_cell(j, &self.state.masks[j])?);
        }
        for dir in [Direction::Forward, Direction::Backward] {
            let path: Vec<usize> = match dir {
                Direction::Forward => (i + 1..c).collect(),
                Direction::Backward => (0..i).rev().collect(),
            };
            let mut pass: HashMap<usize, EncodedCell<T>> = HashMap::new();
            for k in path {
                if self.state.annotated_slices.contains(&k) {
                    continue;
                }
                let bank = self.build_query_memory(i, k, &annotated, &pass)?;
                let res = self.segment_from_memory(&bank, k, false)?;
                observe(k, &res);
                pass.insert(k, self.encode_cell(k, &res.mask)?);
                self.state.masks[k] = res.mask;
                self.state.quality_scores[k] = res.quality;
            }
        }
        Ok(&self.state)
    }

    /// One full round: bump the round counter, segment the guided slice and
    /// re-propagate the whole volume from it.
    pub fn refine_round(&mut self, guidance: &GuidanceMap) -> Result<&SegmentationState<T>> {
        self.check_slice(guidance.slice_index())?;
        self.state.round += 1;
        self.initialize(guidance)?;
        self.propagate(guidance.slice_index())
    }

    /// `refine_round` with a ready-made mask in place of the interaction
    /// network output.
    pub fn refine_with_mask(&mut self, k: usize, mask: SliceMask<T>) -> Result<&SegmentationState<T>> {
        self.check_slice(k)?;
        self.state.round += 1;
        self.annotate_with_mask(k, mask)?;
        self.propagate(k)
    }

    pub fn suggest_next_slice(&self) -> Option<usize> {
        suggest_next_slice(&self.state)
    }
}
