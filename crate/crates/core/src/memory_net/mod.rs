//! Quality-aware memory network: dedicated query and memory encoders, the
//! key-value memory read, a dilated-context decoder and a quality head.

pub mod read;

use crate::data::SliceMask;
use crate::error::{Error, Result};
use crate::nn::{checkpoint, layers, ops, Conv, ConvGeom, Dense, Graph, NodeId, ParamSet, Tensor};
use crate::scalar::Real;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryNetConfig {
    /// Fused feature width `C`; keys carry `C/8` channels, values `C/2`.
    pub channels: usize,
    /// Total downsampling of the encoders, a power of two.
    pub stride: usize,
    /// Dilation rates of the parallel context branches.
    pub dilations: Vec<usize>,
    /// Width of the quality head's convolutions and hidden layers.
    pub quality_width: usize,
    /// Width of the full-resolution refinement stage.
    pub refine_width: usize,
}

impl Default for MemoryNetConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            stride: 16,
            dilations: vec![2, 4, 8],
            quality_width: 32,
            refine_width: 8,
        }
    }
}

impl MemoryNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels % 8 != 0 || self.channels == 0 {
            return Err(Error::Config(format!("channels {} must be a positive multiple of 8", self.channels)));
        }
        if !self.stride.is_power_of_two() || self.stride < 2 {
            return Err(Error::Config(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        if self.dilations.is_empty() {
            return Err(Error::Config("at least one dilated branch is required".into()));
        }
        Ok(())
    }

    pub fn key_dim(&self) -> usize {
        self.channels / 8
    }

    pub fn value_dim(&self) -> usize {
        self.channels / 2
    }

    fn stages(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    /// Channel width after encoder stage `i`; the last stage has `C`.
    fn stage_width(&self, i: usize) -> usize {
        (self.channels >> (self.stages() - 1 - i)).max(4)
    }

    /// Processing size for an `h x w` slice: rounded up to a stride multiple.
    pub fn work_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride) * self.stride, w.div_ceil(self.stride) * self.stride)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<(Conv, Conv)>,
    key: Conv,
    value: Conv,
}

impl Encoder {
    fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, cin: usize, cfg: &MemoryNetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::new();
        let mut c = cin;
        for i in 0..cfg.stages() {
            let wd = cfg.stage_width(i);
            stages.push((
                Conv::new(ps, &format!("{name}.stage{i}.down"), c, wd, ConvGeom::down3(), rng),
                Conv::new(ps, &format!("{name}.stage{i}.conv"), wd, wd, ConvGeom::same3(1), rng),
            ));
            c = wd;
        }
        Self {
            stages,
            key: Conv::new(ps, &format!("{name}.key"), c, cfg.key_dim(), ConvGeom::same3(1), rng),
            value: Conv::new(ps, &format!("{name}.value"), c, cfg.value_dim(), ConvGeom::same3(1), rng),
        }
    }

    /// `(key, value, intermediate stage outputs)`.
    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: NodeId) -> (NodeId, NodeId, Vec<NodeId>) {
        let mut h = x;
        let mut skips = Vec::new();
        for (down, conv) in &self.stages {
            h = down.apply_relu(g, h);
            h = conv.apply_relu(g, h);
            skips.push(h);
        }
        skips.pop();
        (self.key.apply(g, h), self.value.apply(g, h), skips)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    branches: Vec<Conv>,
    /// One per query skip, deepest first.
    refine: Vec<Conv>,
    coarse_head: Conv,
    full_a: Conv,
    full_b: Conv,
}

#[derive(Debug, Clone)]
struct QualityHead {
    convs: [Conv; 3],
    fcs: [Dense; 3],
}

/// Query-side features: key and value maps plus the encoder skips and the
/// working-size image used by the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding<T> {
    /// `[C/8, H, W]`.
    pub key: Tensor<T>,
    /// `[C/2, H, W]`.
    pub value: Tensor<T>,
    pub skips: Vec<Tensor<T>>,
    pub image: Tensor<T>,
    /// Original slice size.
    pub out_dims: (usize, usize),
}

/// A stored (slice, mask) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryCell<T> {
    pub slice_index: usize,
    pub image: Array2<T>,
    pub mask: SliceMask<T>,
}

impl<T: Real> MemoryCell<T> {
    pub fn new(slice_index: usize, image: Array2<T>, mask: SliceMask<T>) -> Result<Self> {
        if image.dim() != mask.dim() {
            return Err(Error::arg(format!(
                "memory cell image {:?} and mask {:?} differ in shape",
                image.dim(),
                mask.dim()
            )));
        }
        Ok(Self {
            slice_index,
            image,
            mask,
        })
    }
}

/// Memory-encoder output for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedCell<T> {
    pub slice_index: usize,
    pub key: Tensor<T>,
    pub value: Tensor<T>,
}

fn same_shape<T: Real>(a: &EncodedCell<T>, b: &EncodedCell<T>) -> bool {
    a.key.shape() == b.key.shape() && a.value.shape() == b.value.shape()
}

/// Ordered memory cells with their stacked key/value matrices.
#[derive(Debug, Clone, Default)]
pub struct MemoryBank<T> {
    cells: Vec<EncodedCell<T>>,
    stacked_key: Vec<T>,
    stacked_value: Vec<T>,
}

impl<T: Real> MemoryBank<T> {
    pub fn new() -> Self {
        Self {
            cells: Vec::new(),
            stacked_key: Vec::new(),
            stacked_value: Vec::new(),
        }
    }

    pub fn from_cells(cells: Vec<EncodedCell<T>>) -> Result<Self> {
        if let Some(first) = cells.first() {
            if cells.iter().any(|c| !same_shape(first, c)) {
                return Err(Error::arg("memory cell shapes differ within a bank"));
            }
        }
        let mut bank = Self {
            cells,
            ..Self::new()
        };
        if !bank.cells.is_empty() {
            bank.restack();
        }
        Ok(bank)
    }

    pub fn push(&mut self, cell: EncodedCell<T>) -> Result<()> {
        if let Some(first) = self.cells.first() {
            if !same_shape(first, &cell) {
                return Err(Error::arg("memory cell shapes differ within a bank"));
            }
        }
        self.cells.push(cell);
        self.restack();
        Ok(())
    }

    fn restack(&mut self) {
        let ck = self.cells[0].key.chw().0;
        let cv = self.cells[0].value.chw().0;
        let keys: Vec<&[T]> = self.cells.iter().map(|c| c.key.data()).collect();
        let values: Vec<&[T]> = self.cells.iter().map(|c| c.value.data()).collect();
        self.stacked_key = read::stack_cells(&keys, ck);
        self.stacked_value = read::stack_cells(&values, cv);
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[EncodedCell<T>] {
        &self.cells
    }

    pub fn slice_indices(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c.slice_index).collect()
    }

    /// Keys as `[C/8, N*H*W]`.
    pub fn stacked_key(&self) -> &[T] {
        &self.stacked_key
    }

    /// Values as `[C/2, N*H*W]`.
    pub fn stacked_value(&self) -> &[T] {
        &self.stacked_value
    }
}

/// Result of reading memory for one query.
#[derive(Debug, Clone)]
pub struct MemoryReadOutput<T> {
    /// `[C/2, H, W]`.
    pub summarized: Tensor<T>,
    /// `[C, H, W]`: summarized channels first, then the query value.
    pub fused: Tensor<T>,
    /// `[N*H*W, H*W]` read weights.
    pub read_weights: Option<Vec<T>>,
}

/// Read `bank` with a `[C/8, H, W]` query key. Returns `[C/2, H, W]` and the
/// read weights.
pub fn memory_read<T: Real>(bank: &MemoryBank<T>, query_key: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    if bank.is_empty() {
        return Err(Error::arg("memory bank is empty"));
    }
    let (ck, h, w) = query_key.chw();
    let cell = &bank.cells[0];
    if cell.key.shape() != query_key.shape() {
        return Err(Error::arg(format!(
            "memory key shape {:?} does not match query key {:?}",
            cell.key.shape(),
            query_key.shape()
        )));
    }
    let cv = cell.value.chw().0;
    let (out, cache) = read::read_forward(&bank.stacked_key, &bank.stacked_value, query_key.data(), ck, cv);
    Ok((Tensor::from_vec(&[cv, h, w], out), cache.weights))
}

/// Channel concatenation `[summarized; query_value]`.
pub fn fuse<T: Real>(summarized: &Tensor<T>, query_value: &Tensor<T>) -> Result<Tensor<T>> {
    let (a, ah, aw) = summarized.chw();
    let (b, bh, bw) = query_value.chw();
    if (ah, aw) != (bh, bw) || a != b {
        return Err(Error::arg(format!(
            "cannot fuse summarized {:?} with query value {:?}",
            summarized.shape(),
            query_value.shape()
        )));
    }
    Ok(Tensor::concat_channels(&[summarized, query_value]))
}

/// Resize a 2D map to the working size as a `[1, h, w]` tensor.
fn to_work<T: Real>(img: ArrayView2<'_, T>, dims: (usize, usize)) -> Tensor<T> {
    let (h, w) = img.dim();
    let t = Tensor::from_vec(&[1, h, w], img.iter().copied().collect());
    if (h, w) == dims {
        t
    } else {
        ops::resize_bilinear(&t, dims.0, dims.1)
    }
}

#[derive(Debug, Clone)]
pub struct MemoryNet<T> {
    cfg: MemoryNetConfig,
    params: ParamSet<T>,
    query_enc: Encoder,
    memory_enc: Encoder,
    decoder: Decoder,
    quality: QualityHead,
    quality_params: Vec<crate::nn::ParamId>,
}

/// Graph handles of one query encoding.
pub struct QueryNodes {
    pub key: NodeId,
    pub value: NodeId,
    pub skips: Vec<NodeId>,
    pub image: NodeId,
}

impl<T: Real> MemoryNet<T> {
    pub fn new(cfg: MemoryNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let query_enc = Encoder::new(&mut ps, "query", 1, &cfg, &mut rng);
        let memory_enc = Encoder::new(&mut ps, "memory", 2, &cfg, &mut rng);

        let c = cfg.channels;
        let half = cfg.value_dim();
        let branches = cfg
            .dilations
            .iter()
            .map(|&d| Conv::new(&mut ps, &format!("decoder.context_d{d}"), c, half, ConvGeom::same3(d), &mut rng))
            .collect();
        let mut refine = Vec::new();
        let mut cin = half;
        for i in (0..cfg.stages() - 1).rev() {
            let skip_c = cfg.stage_width(i);
            let out = skip_c.max(8);
            refine.push(Conv::new(
                &mut ps,
                &format!("decoder.refine{i}"),
                cin + skip_c,
                out,
                ConvGeom::same3(1),
                &mut rng,
            ));
            cin = out;
        }
        let coarse_head = Conv::new(&mut ps, "decoder.coarse_head", cin, 1, ConvGeom::pointwise(), &mut rng);
        let rw = cfg.refine_width;
        let full_a = Conv::new(&mut ps, "decoder.full_a", 2, rw, ConvGeom::same3(1), &mut rng);
        let full_b = Conv::new(&mut ps, "decoder.full_b", rw, 1, ConvGeom::same3(1), &mut rng);
        // Start the residual refinement near zero so early training follows
        // the coarse prediction.
        ps.get_mut(full_b.w).scale(T::lit(0.1));

        let before = ps.len();
        let qw = cfg.quality_width;
        let quality = QualityHead {
            convs: [
                Conv::new(&mut ps, "quality.conv0", c + 1, qw, ConvGeom::same3(1), &mut rng),
                Conv::new(&mut ps, "quality.conv1", qw, qw, ConvGeom::same3(1), &mut rng),
                Conv::new(&mut ps, "quality.conv2", qw, qw, ConvGeom::same3(1), &mut rng),
            ],
            fcs: [
                Dense::new(&mut ps, "quality.fc0", qw, qw, &mut rng),
                Dense::new(&mut ps, "quality.fc1", qw, qw / 2, &mut rng),
                Dense::new(&mut ps, "quality.fc2", qw / 2, 1, &mut rng),
            ],
        };
        let quality_params = (before..ps.len()).map(crate::nn::ParamId).collect();
        Ok(Self {
            cfg,
            params: ps,
            query_enc,
            memory_enc,
            decoder: Decoder {
                branches,
                refine,
                coarse_head,
                full_a,
                full_b,
            },
            quality,
            quality_params,
        })
    }

    pub fn config(&self) -> &MemoryNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Parameters of the quality head, trained after the rest is frozen.
    pub fn quality_param_ids(&self) -> &[crate::nn::ParamId] {
        &self.quality_params
    }

    fn check_dims(&self, h: usize, w: usize) -> Result<()> {
        if h < self.cfg.stride || w < self.cfg.stride {
            return Err(Error::arg(format!(
                "slice {h}x{w} is smaller than the encoder stride {}",
                self.cfg.stride
            )));
        }
        Ok(())
    }

    // Graph-level building blocks, shared by training and inference.

    pub fn query_nodes(&self, g: &mut Graph<'_, T>, image: Tensor<T>) -> QueryNodes {
        let img = g.input(image);
        let (key, value, skips) = self.query_enc.forward(g, img);
        QueryNodes {
            key,
            value,
            skips,
            image: img,
        }
    }

    /// `(key, value)` nodes for a `[2, h, w]` (image, mask) input.
    pub fn memory_nodes(&self, g: &mut Graph<'_, T>, image_and_mask: Tensor<T>) -> (NodeId, NodeId) {
        let x = g.input(image_and_mask);
        let (k, v, _) = self.memory_enc.forward(g, x);
        (k, v)
    }

    /// Full-resolution logits `[1, h, w]` from fused features and the query skips.
    pub fn decode_nodes(&self, g: &mut Graph<'_, T>, fused: NodeId, skips: &[NodeId], image: NodeId) -> NodeId {
        let mut ctx: Option<NodeId> = None;
        for b in &self.decoder.branches {
            let y = b.apply(g, fused);
            ctx = Some(match ctx {
                Some(acc) => g.add(acc, y),
                None => y,
            });
        }
        let mut h = g.relu(ctx.expect("at least one branch"));
        for (conv, &skip) in self.decoder.refine.iter().zip(skips.iter().rev()) {
            let (_, sh, sw) = g.value(skip).chw();
            let up = g.resize(h, sh, sw);
            let cat = g.concat(&[up, skip]);
            h = conv.apply_relu(g, cat);
        }
        let coarse = self.decoder.coarse_head.apply(g, h);
        let (_, ih, iw) = g.value(image).chw();
        let coarse_full = g.resize(coarse, ih, iw);
        let cat = g.concat(&[coarse_full, image]);
        let r = self.decoder.full_a.apply_relu(g, cat);
        let r = self.decoder.full_b.apply(g, r);
        g.add(coarse_full, r)
    }

    /// Quality logit from fused features and a `[1, H, W]` pooled mask.
    pub fn quality_nodes(&self, g: &mut Graph<'_, T>, fused: NodeId, pooled_mask: NodeId) -> NodeId {
        let mut h = g.concat(&[fused, pooled_mask]);
        for c in &self.quality.convs {
            h = c.apply_relu(g, h);
        }
        h = g.global_avg(h);
        h = self.quality.fcs[0].apply(g, h);
        h = g.relu(h);
        h = self.quality.fcs[1].apply(g, h);
        h = g.relu(h);
        self.quality.fcs[2].apply(g, h)
    }

    /// `[1, H, W]` area-averaged mask at feature resolution.
    pub fn pool_mask(&self, mask: ArrayView2<'_, T>) -> Tensor<T> {
        let (h, w) = mask.dim();
        let dims = self.cfg.work_dims(h, w);
        ops::avg_pool(&to_work(mask, dims), self.cfg.stride)
    }

    /// `[1, h', w']` working-size image.
    pub fn work_image(&self, slice: ArrayView2<'_, T>) -> Tensor<T> {
        let (h, w) = slice.dim();
        to_work(slice, self.cfg.work_dims(h, w))
    }

    /// `[2, h', w']` working-size (image, mask) pair.
    pub fn work_pair(&self, image: ArrayView2<'_, T>, mask: ArrayView2<'_, T>) -> Tensor<T> {
        let (h, w) = image.dim();
        let dims = self.cfg.work_dims(h, w);
        Tensor::concat_channels(&[&to_work(image, dims), &to_work(mask, dims)])
    }

    // Array-level operations.

    pub fn encode_query(&self, slice: ArrayView2<'_, T>) -> Result<QueryEmbedding<T>> {
        let (h, w) = slice.dim();
        self.check_dims(h, w)?;
        let mut g = Graph::inference(&self.params);
        let q = self.query_nodes(&mut g, self.work_image(slice));
        Ok(QueryEmbedding {
            key: g.take_value(q.key),
            value: g.take_value(q.value),
            skips: q.skips.iter().map(|&s| g.take_value(s)).collect(),
            image: g.take_value(q.image),
            out_dims: (h, w),
        })
    }

    pub fn encode_memory(&self, cell: &MemoryCell<T>) -> Result<EncodedCell<T>> {
        let (h, w) = cell.image.dim();
        self.check_dims(h, w)?;
        if cell.mask.dim() != (h, w) {
            return Err(Error::arg("memory cell mask and image differ in shape"));
        }
        let mut g = Graph::inference(&self.params);
        let (k, v) = self.memory_nodes(&mut g, self.work_pair(cell.image.view(), cell.mask.probabilities.view()));
        Ok(EncodedCell {
            slice_index: cell.slice_index,
            key: g.take_value(k),
            value: g.take_value(v),
        })
    }

    pub fn read(&self, bank: &MemoryBank<T>, query: &QueryEmbedding<T>, keep_weights: bool) -> Result<MemoryReadOutput<T>> {
        let (summarized, weights) = memory_read(bank, &query.key)?;
        let fused = fuse(&summarized, &query.value)?;
        Ok(MemoryReadOutput {
            summarized,
            fused,
            read_weights: keep_weights.then_some(weights),
        })
    }

    /// Probability map at the query's original size.
    pub fn decode_segmentation(&self, fused: &Tensor<T>, query: &QueryEmbedding<T>, slice_index: usize) -> Result<SliceMask<T>> {
        let expected = [self.cfg.channels, query.key.shape()[1], query.key.shape()[2]];
        if fused.shape() != expected {
            return Err(Error::arg(format!("fused features {:?}, expected {:?}", fused.shape(), expected)));
        }
        let mut g = Graph::inference(&self.params);
        let f = g.input(fused.clone());
        let skips: Vec<NodeId> = query.skips.iter().map(|s| g.input(s.clone())).collect();
        let img = g.input(query.image.clone());
        let logits = self.decode_nodes(&mut g, f, &skips, img);
        let (h, w) = query.out_dims;
        let logits = g.resize(logits, h, w);
        let prob = g.value(logits).map(ops::sigmoid);
        if !prob.all_finite() {
            return Err(Error::numeric(Some(slice_index), "decoder produced non-finite output"));
        }
        let arr = Array2::from_shape_vec((h, w), prob.into_data()).expect("shape");
        SliceMask::new(arr, slice_index, 0)
    }

    /// Estimated IoU of `mask` in `[0, 1]`.
    pub fn assess_quality(&self, fused: &Tensor<T>, mask: &SliceMask<T>) -> Result<f64> {
        let pooled = self.pool_mask(mask.probabilities.view());
        if pooled.shape()[1..] != fused.shape()[1..] {
            return Err(Error::arg(format!(
                "mask pools to {:?}, fused features are {:?}",
                pooled.shape(),
                fused.shape()
            )));
        }
        let mut g = Graph::inference(&self.params);
        let f = g.input(fused.clone());
        let m = g.input(pooled);
        let logit = self.quality_nodes(&mut g, f, m);
        let v = ops::sigmoid(g.value(logit).data()[0]).to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::numeric(Some(mask.slice_index), "quality head produced non-finite output"));
        }
        Ok(v.clamp(0.0, 1.0))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = serde_json::to_value(&self.cfg).expect("config serializes");
        checkpoint::save(path, &self.params, &cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (loaded, cfg) = checkpoint::load::<T>(path)?;
        let cfg: MemoryNetConfig =
            serde_json::from_value(cfg).map_err(|e| Error::Checkpoint(format!("memory net config: {e}")))?;
        let mut net = Self::new(cfg, 0)?;
        layers::restore_all(&mut net.params, &loaded)?;
        Ok(net)
    }
}

/// Write read weights `[P, Q]` as a CSV matrix for inspection.
pub fn dump_read_weights<T: Real>(weights: &[T], query_locations: usize, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for row in weights.chunks(query_locations) {
        let line: Vec<String> = row.iter().map(|v| format!("{:.6e}", v.to_f64().unwrap_or(f64::NAN))).collect();
        writeln!(f, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
