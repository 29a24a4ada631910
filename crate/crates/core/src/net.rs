//! Desk-scale differentiable network: a per-point MLP encoder standing in
//! for the backbone, mask/semantic/offset heads, per-head filter generators,
//! and the dynamic 1x1-convolution mask decoder, with hand-rolled
//! reverse-mode gradients over the fixed per-scene graph.
//!
//! Parameters live in one flat `f64` buffer behind a named-array layout, so
//! the optimiser, finite-difference checks and checkpoints all address the
//! same storage. Forward activations needed for the backward pass are kept
//! in a [`ForwardTrace`]; decoder hidden activations are recomputed during
//! backprop instead of being cached per (sample, point).
//!
//! Gradient accumulation runs over fixed point chunks whose partial sums are
//! folded in chunk order, so parallel and sequential builds produce
//! bit-identical gradients.

use crate::error::{Error, Result};
use crate::mask::{MaskKind, MaskSet};
use crate::mat::Mat;
use crate::par::{self, POINT_CHUNK};
use crate::rng::rng_for;
use crate::scene::{RelativeCoords, SampleSet, Scene};
use rand::Rng;

/// Which filter generator feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Aux,
    Main,
}

/// Shape of the whole network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    /// Input feature channels `I` (RGB = 3).
    pub input_features: usize,
    /// Width of the two hidden encoder layers.
    pub encoder_hidden: usize,
    /// Backbone output width `D_b`.
    pub d_backbone: usize,
    /// Mask feature width `d'`.
    pub d_mask: usize,
    /// Decoder hidden width `h`.
    pub decoder_hidden: usize,
    /// Semantic class count `S`.
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            input_features: 3,
            encoder_hidden: 32,
            d_backbone: 32,
            d_mask: 16,
            decoder_hidden: 8,
            classes: 5,
        }
    }
}

/// Flat length of one sampled point's decoder filters for the fixed 2-layer
/// decoder: `(d_mask + 3) * hidden + hidden` for conv1 and `hidden + 1` for
/// conv2.
pub fn filter_length(d_mask: usize, hidden: usize, layers: usize) -> Result<usize> {
    if layers != 2 {
        return Err(Error::UnsupportedConfig(format!(
            "decoder depth is fixed at 2 layers, got {layers}"
        )));
    }
    Ok((d_mask + 3) * hidden + hidden + hidden + 1)
}

impl NetConfig {
    pub fn filter_len(&self) -> usize {
        filter_length(self.d_mask, self.decoder_hidden, 2).expect("2 layers")
    }

    pub fn encoder_input(&self) -> usize {
        3 + self.input_features
    }
}

/// Offsets of one named parameter array inside the flat buffer. Weights are
/// `rows x cols` row-major with `rows` = output units; biases have `cols = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayDef {
    pub name: &'static str,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ArrayDef {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn build_layout(cfg: &NetConfig) -> Vec<ArrayDef> {
    let f = cfg.filter_len();
    let shapes: [(&'static str, usize, usize); 16] = [
        ("encoder.0.w", cfg.encoder_hidden, cfg.encoder_input()),
        ("encoder.0.b", cfg.encoder_hidden, 1),
        ("encoder.1.w", cfg.encoder_hidden, cfg.encoder_hidden),
        ("encoder.1.b", cfg.encoder_hidden, 1),
        ("encoder.2.w", cfg.d_backbone, cfg.encoder_hidden),
        ("encoder.2.b", cfg.d_backbone, 1),
        ("mask.w", cfg.d_mask, cfg.d_backbone),
        ("mask.b", cfg.d_mask, 1),
        ("semantic.w", cfg.classes, cfg.d_backbone),
        ("semantic.b", cfg.classes, 1),
        ("offset.w", 3, cfg.d_backbone),
        ("offset.b", 3, 1),
        ("generator.aux.w", f, cfg.d_backbone),
        ("generator.aux.b", f, 1),
        ("generator.main.w", f, cfg.d_backbone),
        ("generator.main.b", f, 1),
    ];
    let mut defs = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for (name, rows, cols) in shapes {
        defs.push(ArrayDef { name, offset, rows, cols });
        offset += rows * cols;
    }
    defs
}

/// All learnable parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub cfg: NetConfig,
    layout: Vec<ArrayDef>,
    data: Vec<f64>,
}

impl NetworkParams {
    /// Seeded init: weights uniform in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// all biases zero (so initial mask logits sit near zero).
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let layout = build_layout(&cfg);
        let total = layout.iter().map(ArrayDef::len).sum();
        let mut data = vec![0.0; total];
        let mut rng = rng_for(seed, 0x1417);
        for def in &layout {
            if def.cols == 1 {
                continue; // bias
            }
            let s = 1.0 / (def.cols as f64).sqrt();
            for v in &mut data[def.range()] {
                *v = rng.random_range(-s..s);
            }
        }
        NetworkParams { cfg, layout, data }
    }

    pub fn zeros(cfg: NetConfig) -> Self {
        let layout = build_layout(&cfg);
        let total = layout.iter().map(ArrayDef::len).sum();
        NetworkParams { cfg, layout, data: vec![0.0; total] }
    }

    pub fn n_params(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layout(&self) -> &[ArrayDef] {
        &self.layout
    }

    pub fn array(&self, name: &str) -> &[f64] {
        let def = self.def(name);
        &self.data[def.range()]
    }

    pub fn array_mut(&mut self, name: &str) -> &mut [f64] {
        let def = self.def(name).clone();
        &mut self.data[def.range()]
    }

    fn def(&self, name: &str) -> &ArrayDef {
        self.layout
            .iter()
            .find(|d| d.name == name)
            .unwrap_or_else(|| panic!("unknown parameter array {name}"))
    }

    fn gen_names(head: Head) -> (&'static str, &'static str) {
        match head {
            Head::Aux => ("generator.aux.w", "generator.aux.b"),
            Head::Main => ("generator.main.w", "generator.main.b"),
        }
    }
}

/// Flattened decoder filters for each sampled point.
///
/// Row layout: conv1 weights `(d_mask+3) x hidden` (input-major per hidden
/// unit), conv1 biases, conv2 weights, conv2 bias.
#[derive(Debug, Clone)]
pub struct DynamicFilterSet {
    pub flat: Mat,
    pub d_mask: usize,
    pub hidden: usize,
}

impl DynamicFilterSet {
    pub fn len_per_point(&self) -> usize {
        self.flat.cols()
    }
}

/// Activations cached for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Encoder inputs: centered coords ++ features, `N x (3+I)`.
    pub input: Mat,
    pub pre0: Mat,
    pub act0: Mat,
    pub pre1: Mat,
    pub act1: Mat,
    /// Backbone features `F_b`, `N x D_b`.
    pub f_b: Mat,
    /// Mask features `F_m`, `N x d_mask`.
    pub f_m: Mat,
    /// `N x S` semantic logits.
    pub sem_logits: Mat,
    /// `N x 3` predicted centroid offsets.
    pub offsets: Mat,
    pub samples: SampleSet,
    pub filters_aux: DynamicFilterSet,
    pub filters_main: DynamicFilterSet,
    /// `K x N` decoder logits per head.
    pub logits_aux: Mat,
    pub logits_main: Mat,
}

fn linear_forward(input: &Mat, w: &[f64], b: &[f64], out_dim: usize, relu: bool) -> Mat {
    let n = input.rows();
    let in_dim = input.cols();
    let mut out = Mat::zeros(n, out_dim);
    par::for_each_chunk_mut(out.data_mut(), POINT_CHUNK * out_dim, |start, slice| {
        let row0 = start / out_dim;
        for (r, orow) in slice.chunks_exact_mut(out_dim).enumerate() {
            let x = input.row(row0 + r);
            for (o, out_v) in orow.iter_mut().enumerate() {
                let wrow = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wv, xv) in wrow.iter().zip(x) {
                    acc += wv * xv;
                }
                *out_v = if relu { acc.max(0.0) } else { acc };
            }
        }
    });
    out
}

fn relu_of(m: &Mat) -> Mat {
    let mut out = m.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// Centered encoder input: coordinates minus the scene mean, concatenated
/// with the raw feature channels. Centering makes decoded masks exactly
/// translation invariant.
fn encoder_input(scene: &Scene) -> Mat {
    let n = scene.len();
    let mut mean = [0.0f64; 3];
    for c in scene.coords() {
        for d in 0..3 {
            mean[d] += c[d];
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let width = 3 + scene.n_features();
    let mut input = Mat::zeros(n, width);
    for i in 0..n {
        let row = input.row_mut(i);
        let c = scene.coord(i);
        for d in 0..3 {
            row[d] = c[d] - mean[d];
        }
        row[3..].copy_from_slice(scene.features_of(i));
    }
    input
}

/// Everything the encoder trunk produces for one scene.
pub struct EncodeOutputs {
    pub input: Mat,
    pub pre0: Mat,
    pub act0: Mat,
    pub pre1: Mat,
    pub act1: Mat,
    pub f_b: Mat,
    pub f_m: Mat,
    pub sem_logits: Mat,
    pub offsets: Mat,
}

/// Deterministic forward pass of the per-point trunk and its three linear
/// heads.
pub fn encode(scene: &Scene, params: &NetworkParams) -> EncodeOutputs {
    let cfg = &params.cfg;
    let input = encoder_input(scene);
    let pre0 = linear_forward(
        &input,
        params.array("encoder.0.w"),
        params.array("encoder.0.b"),
        cfg.encoder_hidden,
        false,
    );
    let act0 = relu_of(&pre0);
    let pre1 = linear_forward(
        &act0,
        params.array("encoder.1.w"),
        params.array("encoder.1.b"),
        cfg.encoder_hidden,
        false,
    );
    let act1 = relu_of(&pre1);
    let f_b = linear_forward(
        &act1,
        params.array("encoder.2.w"),
        params.array("encoder.2.b"),
        cfg.d_backbone,
        false,
    );
    let f_m =
        linear_forward(&f_b, params.array("mask.w"), params.array("mask.b"), cfg.d_mask, false);
    let sem_logits = linear_forward(
        &f_b,
        params.array("semantic.w"),
        params.array("semantic.b"),
        cfg.classes,
        false,
    );
    let offsets =
        linear_forward(&f_b, params.array("offset.w"), params.array("offset.b"), 3, false);
    EncodeOutputs { input, pre0, act0, pre1, act1, f_b, f_m, sem_logits, offsets }
}

/// One flat filter vector per sampled point, generated from its backbone
/// feature by the head's linear generator.
pub fn generate_filters(
    params: &NetworkParams,
    f_b: &Mat,
    samples: &SampleSet,
    head: Head,
) -> DynamicFilterSet {
    let cfg = &params.cfg;
    let (w_name, b_name) = NetworkParams::gen_names(head);
    let w = params.array(w_name);
    let b = params.array(b_name);
    let flen = cfg.filter_len();
    let flat = Mat::map_rows(samples.indices.len(), flen, |k| {
        let x = f_b.row(samples.indices[k]);
        (0..flen)
            .map(|o| {
                let wrow = &w[o * cfg.d_backbone..(o + 1) * cfg.d_backbone];
                b[o] + wrow.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>()
            })
            .collect()
    });
    DynamicFilterSet { flat, d_mask: cfg.d_mask, hidden: cfg.decoder_hidden }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Decoder logit for one point given one sample's filters.
#[inline]
fn decode_logit(
    fm_row: &[f64],
    rel: [f64; 3],
    filters: &[f64],
    d_mask: usize,
    hidden: usize,
) -> f64 {
    let d_in = d_mask + 3;
    let b1 = &filters[d_in * hidden..d_in * hidden + hidden];
    let w2 = &filters[d_in * hidden + hidden..d_in * hidden + 2 * hidden];
    let b2 = filters[d_in * hidden + 2 * hidden];
    let mut z2 = b2;
    for j in 0..hidden {
        let w1 = &filters[j * d_in..(j + 1) * d_in];
        let mut z1 = b1[j];
        for (wv, xv) in w1[..d_mask].iter().zip(fm_row) {
            z1 += wv * xv;
        }
        z1 += w1[d_mask] * rel[0] + w1[d_mask + 1] * rel[1] + w1[d_mask + 2] * rel[2];
        if z1 > 0.0 {
            z2 += w2[j] * z1;
        }
    }
    z2
}

/// Soft mask over all points from one sampled point's filters: two 1x1 conv
/// layers with ReLU between, logistic squashing at the output. The input per
/// point is its mask feature concatenated with the anchor-relative
/// coordinates; decoding is unconditional on semantics.
pub fn decode_mask(f_m: &Mat, rel: &RelativeCoords, filters: &[f64], cfg: &NetConfig) -> Vec<f64> {
    (0..f_m.rows())
        .map(|i| {
            sigmoid(decode_logit(
                f_m.row(i),
                rel.values[i],
                filters,
                cfg.d_mask,
                cfg.decoder_hidden,
            ))
        })
        .collect()
}

/// `K x N` decoder logits for one head's filters.
pub fn decode_head_logits(
    scene: &Scene,
    f_m: &Mat,
    samples: &SampleSet,
    filters: &DynamicFilterSet,
    cfg: &NetConfig,
) -> Mat {
    let n = scene.len();
    Mat::map_rows(samples.indices.len(), n, |k| {
        let anchor = scene.coord(samples.indices[k]);
        let frow = filters.flat.row(k);
        (0..n)
            .map(|i| {
                let p = scene.coord(i);
                let rel = [anchor[0] - p[0], anchor[1] - p[1], anchor[2] - p[2]];
                decode_logit(f_m.row(i), rel, frow, cfg.d_mask, cfg.decoder_hidden)
            })
            .collect()
    })
}

/// Logistic squashing of decoder logits into a soft mask set.
pub fn logits_to_probs(logits: &Mat) -> MaskSet {
    let mut m = logits.clone();
    for v in m.data_mut() {
        *v = sigmoid(*v);
    }
    MaskSet::new(m, MaskKind::Soft).expect("sigmoid output is in [0,1]")
}

/// Mask predictions from both heads plus the trace for backprop.
pub struct HeadOutputs {
    pub trace: ForwardTrace,
    pub aux_preds: MaskSet,
    pub main_preds: MaskSet,
}

/// Full forward pass: trunk, both filter generators, both decoders. Both
/// heads share `F_m` and the relative coordinates but use their own
/// generator parameters.
pub fn forward_heads(scene: &Scene, params: &NetworkParams, samples: &SampleSet) -> HeadOutputs {
    let enc = encode(scene, params);
    let filters_aux = generate_filters(params, &enc.f_b, samples, Head::Aux);
    let filters_main = generate_filters(params, &enc.f_b, samples, Head::Main);
    let logits_aux = decode_head_logits(scene, &enc.f_m, samples, &filters_aux, &params.cfg);
    let logits_main = decode_head_logits(scene, &enc.f_m, samples, &filters_main, &params.cfg);
    let aux_preds = logits_to_probs(&logits_aux);
    let main_preds = logits_to_probs(&logits_main);
    let trace = ForwardTrace {
        input: enc.input,
        pre0: enc.pre0,
        act0: enc.act0,
        pre1: enc.pre1,
        act1: enc.act1,
        f_b: enc.f_b,
        f_m: enc.f_m,
        sem_logits: enc.sem_logits,
        offsets: enc.offsets,
        samples: samples.clone(),
        filters_aux,
        filters_main,
        logits_aux,
        logits_main,
    };
    HeadOutputs { trace, aux_preds, main_preds }
}

/// Loss derivatives with respect to network outputs; `None` for outputs that
/// do not participate in this step's loss.
#[derive(Debug, Default)]
pub struct OutputGrads {
    /// `K x N` d(loss)/d(logit) for the auxiliary head.
    pub dlogits_aux: Option<Mat>,
    /// `K x N` d(loss)/d(logit) for the main head.
    pub dlogits_main: Option<Mat>,
    /// `N x S` d(loss)/d(semantic logit).
    pub dsem: Option<Mat>,
    /// `N x 3` d(loss)/d(predicted offset).
    pub doffsets: Option<Mat>,
}

/// Per-chunk partial sums folded in chunk order; this fixes the floating
/// point reduction order regardless of threading.
struct ChunkPartial {
    dw: Vec<f64>,
    db: Vec<f64>,
}

fn backward_decoder(
    scene: &Scene,
    trace: &ForwardTrace,
    filters: &DynamicFilterSet,
    dlogits: &Mat,
    d_fm: &mut Mat,
    cfg: &NetConfig,
) -> Mat {
    let n = scene.len();
    let k_count = trace.samples.indices.len();
    let d_mask = cfg.d_mask;
    let hidden = cfg.decoder_hidden;
    let d_in = d_mask + 3;
    let flen = cfg.filter_len();
    let anchors: Vec<[f64; 3]> =
        trace.samples.indices.iter().map(|s| scene.coord(*s)).collect();

    let ranges = par::chunk_ranges(n, POINT_CHUNK);
    let partials: Vec<(Vec<f64>, Vec<Vec<f64>>)> = par::map_indexed(ranges.len(), |c| {
        let range = ranges[c].clone();
        let mut dfilters = vec![0.0f64; k_count * flen];
        let mut dfm_rows: Vec<Vec<f64>> = Vec::with_capacity(range.len());
        let mut z1 = vec![0.0f64; hidden];
        for i in range.clone() {
            let fm_row = trace.f_m.row(i);
            let p = scene.coord(i);
            let mut dfm_i = vec![0.0f64; d_mask];
            for k in 0..k_count {
                let dz2 = dlogits.at(k, i);
                if dz2 == 0.0 {
                    continue;
                }
                let a = anchors[k];
                let rel = [a[0] - p[0], a[1] - p[1], a[2] - p[2]];
                let frow = filters.flat.row(k);
                let b1 = &frow[d_in * hidden..d_in * hidden + hidden];
                let w2 = &frow[d_in * hidden + hidden..d_in * hidden + 2 * hidden];
                // Recompute conv1 pre-activations for this (k, i).
                for (j, z) in z1.iter_mut().enumerate() {
                    let w1 = &frow[j * d_in..(j + 1) * d_in];
                    let mut acc = b1[j];
                    for (wv, xv) in w1[..d_mask].iter().zip(fm_row) {
                        acc += wv * xv;
                    }
                    acc += w1[d_mask] * rel[0] + w1[d_mask + 1] * rel[1] + w1[d_mask + 2] * rel[2];
                    *z = acc;
                }
                let df = &mut dfilters[k * flen..(k + 1) * flen];
                df[d_in * hidden + 2 * hidden] += dz2; // conv2 bias
                for j in 0..hidden {
                    if z1[j] <= 0.0 {
                        continue;
                    }
                    df[d_in * hidden + hidden + j] += dz2 * z1[j]; // conv2 weight
                    let dz1 = dz2 * w2[j];
                    df[d_in * hidden + j] += dz1; // conv1 bias
                    let dw1 = &mut df[j * d_in..(j + 1) * d_in];
                    for (dw, xv) in dw1[..d_mask].iter_mut().zip(fm_row) {
                        *dw += dz1 * xv;
                    }
                    dw1[d_mask] += dz1 * rel[0];
                    dw1[d_mask + 1] += dz1 * rel[1];
                    dw1[d_mask + 2] += dz1 * rel[2];
                    let w1 = &frow[j * d_in..(j + 1) * d_in];
                    for (dx, wv) in dfm_i.iter_mut().zip(&w1[..d_mask]) {
                        *dx += dz1 * wv;
                    }
                }
            }
            dfm_rows.push(dfm_i);
        }
        (dfilters, dfm_rows)
    });

    // Fold in chunk order: filter grads sum across chunks, F_m grads are
    // per-point exclusive.
    let mut dfilters = Mat::zeros(k_count, flen);
    for (c, (partial, dfm_rows)) in partials.iter().enumerate() {
        for (acc, v) in dfilters.data_mut().iter_mut().zip(partial) {
            *acc += v;
        }
        for (offset, row) in dfm_rows.iter().enumerate() {
            let i = ranges[c].start + offset;
            for (acc, v) in d_fm.row_mut(i).iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    dfilters
}

/// Accumulates `d(loss)/dW, db` of a linear layer `y = Wx + b` evaluated over
/// all points, and returns `dx`. `dy` is `N x out`, `input` is `N x in`.
fn backward_linear(
    input: &Mat,
    w: &[f64],
    dy: &Mat,
    dw: &mut [f64],
    db: &mut [f64],
) -> Mat {
    let n = input.rows();
    let in_dim = input.cols();
    let out_dim = dy.cols();
    let ranges = par::chunk_ranges(n, POINT_CHUNK);
    let mut dx = Mat::zeros(n, in_dim);
    // dx rows are exclusive per point; write them in a chunked pass.
    par::for_each_chunk_mut(dx.data_mut(), POINT_CHUNK * in_dim, |start, slice| {
        let row0 = start / in_dim;
        for (r, xrow) in slice.chunks_exact_mut(in_dim).enumerate() {
            let g = dy.row(row0 + r);
            for (o, gv) in g.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                let wrow = &w[o * in_dim..(o + 1) * in_dim];
                for (xv, wv) in xrow.iter_mut().zip(wrow) {
                    *xv += gv * wv;
                }
            }
        }
    });
    // Weight/bias grads: per-chunk partials folded in order.
    let partials: Vec<ChunkPartial> = par::map_indexed(ranges.len(), |c| {
        let mut p = ChunkPartial { dw: vec![0.0; w.len()], db: vec![0.0; out_dim] };
        for i in ranges[c].clone() {
            let x = input.row(i);
            let g = dy.row(i);
            for (o, gv) in g.iter().enumerate() {
                if *gv == 0.0 {
                    continue;
                }
                p.db[o] += gv;
                let wrow = &mut p.dw[o * in_dim..(o + 1) * in_dim];
                for (dwv, xv) in wrow.iter_mut().zip(x) {
                    *dwv += gv * xv;
                }
            }
        }
        p
    });
    for p in partials {
        for (acc, v) in dw.iter_mut().zip(&p.dw) {
            *acc += v;
        }
        for (acc, v) in db.iter_mut().zip(&p.db) {
            *acc += v;
        }
    }
    dx
}

fn relu_backward(pre: &Mat, dact: &mut Mat) {
    for (d, z) in dact.data_mut().iter_mut().zip(pre.data()) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Reverse-mode pass from output gradients to a flat parameter gradient
/// buffer aligned with [`NetworkParams::data`].
pub fn backward(
    scene: &Scene,
    params: &NetworkParams,
    trace: &ForwardTrace,
    out_grads: &OutputGrads,
) -> Vec<f64> {
    let cfg = &params.cfg;
    let mut grads = NetworkParams::zeros(*cfg);
    let n = scene.len();
    let mut d_fm = Mat::zeros(n, cfg.d_mask);
    let mut d_fb = Mat::zeros(n, cfg.d_backbone);

    // Decoder paths.
    for (dlogits, head) in [
        (out_grads.dlogits_aux.as_ref(), Head::Aux),
        (out_grads.dlogits_main.as_ref(), Head::Main),
    ] {
        let Some(dlogits) = dlogits else { continue };
        let filters = match head {
            Head::Aux => &trace.filters_aux,
            Head::Main => &trace.filters_main,
        };
        let dfilters = backward_decoder(scene, trace, filters, dlogits, &mut d_fm, cfg);
        // Filters came from the head's generator: flat[k] = G f_b[s_k] + g_b.
        let (w_name, b_name) = NetworkParams::gen_names(head);
        let gen_w = params.array(w_name).to_vec();
        let flen = cfg.filter_len();
        {
            let gw = grads.array_mut(w_name);
            for (k, &s) in trace.samples.indices.iter().enumerate() {
                let x = trace.f_b.row(s);
                let df = dfilters.row(k);
                for (o, dfv) in df.iter().enumerate() {
                    if *dfv == 0.0 {
                        continue;
                    }
                    let wrow = &mut gw[o * cfg.d_backbone..(o + 1) * cfg.d_backbone];
                    for (dwv, xv) in wrow.iter_mut().zip(x) {
                        *dwv += dfv * xv;
                    }
                }
            }
        }
        {
            let gb = grads.array_mut(b_name);
            for k in 0..dfilters.rows() {
                for (acc, v) in gb.iter_mut().zip(dfilters.row(k)) {
                    *acc += v;
                }
            }
        }
        for (k, &s) in trace.samples.indices.iter().enumerate() {
            let df = dfilters.row(k);
            let row = d_fb.row_mut(s);
            for o in 0..flen {
                let dfv = df[o];
                if dfv == 0.0 {
                    continue;
                }
                let wrow = &gen_w[o * cfg.d_backbone..(o + 1) * cfg.d_backbone];
                for (acc, wv) in row.iter_mut().zip(wrow) {
                    *acc += dfv * wv;
                }
            }
        }
    }

    // Mask head: F_m = mask.w F_b + mask.b.
    {
        let mut dw = vec![0.0; params.array("mask.w").len()];
        let mut db = vec![0.0; params.array("mask.b").len()];
        let dx = backward_linear(&trace.f_b, params.array("mask.w"), &d_fm, &mut dw, &mut db);
        grads.array_mut("mask.w").copy_from_slice(&dw);
        grads.array_mut("mask.b").copy_from_slice(&db);
        for (acc, v) in d_fb.data_mut().iter_mut().zip(dx.data()) {
            *acc += v;
        }
    }

    // Semantic and offset heads.
    if let Some(dsem) = &out_grads.dsem {
        let mut dw = vec![0.0; params.array("semantic.w").len()];
        let mut db = vec![0.0; params.array("semantic.b").len()];
        let dx = backward_linear(&trace.f_b, params.array("semantic.w"), dsem, &mut dw, &mut db);
        grads.array_mut("semantic.w").copy_from_slice(&dw);
        grads.array_mut("semantic.b").copy_from_slice(&db);
        for (acc, v) in d_fb.data_mut().iter_mut().zip(dx.data()) {
            *acc += v;
        }
    }
    if let Some(doff) = &out_grads.doffsets {
        let mut dw = vec![0.0; params.array("offset.w").len()];
        let mut db = vec![0.0; params.array("offset.b").len()];
        let dx = backward_linear(&trace.f_b, params.array("offset.w"), doff, &mut dw, &mut db);
        grads.array_mut("offset.w").copy_from_slice(&dw);
        grads.array_mut("offset.b").copy_from_slice(&db);
        for (acc, v) in d_fb.data_mut().iter_mut().zip(dx.data()) {
            *acc += v;
        }
    }

    // Encoder trunk: input -> pre0 -> relu -> pre1 -> relu -> f_b.
    {
        let mut dw = vec![0.0; params.array("encoder.2.w").len()];
        let mut db = vec![0.0; params.array("encoder.2.b").len()];
        let mut dact1 =
            backward_linear(&trace.act1, params.array("encoder.2.w"), &d_fb, &mut dw, &mut db);
        grads.array_mut("encoder.2.w").copy_from_slice(&dw);
        grads.array_mut("encoder.2.b").copy_from_slice(&db);
        relu_backward(&trace.pre1, &mut dact1);

        let mut dw = vec![0.0; params.array("encoder.1.w").len()];
        let mut db = vec![0.0; params.array("encoder.1.b").len()];
        let mut dact0 =
            backward_linear(&trace.act0, params.array("encoder.1.w"), &dact1, &mut dw, &mut db);
        grads.array_mut("encoder.1.w").copy_from_slice(&dw);
        grads.array_mut("encoder.1.b").copy_from_slice(&db);
        relu_backward(&trace.pre0, &mut dact0);

        let mut dw = vec![0.0; params.array("encoder.0.w").len()];
        let mut db = vec![0.0; params.array("encoder.0.b").len()];
        let _dinput =
            backward_linear(&trace.input, params.array("encoder.0.w"), &dact0, &mut dw, &mut db);
        grads.array_mut("encoder.0.w").copy_from_slice(&dw);
        grads.array_mut("encoder.0.b").copy_from_slice(&db);
    }

    let mut out = vec![0.0; grads.n_params()];
    out.copy_from_slice(grads.data());
    out
}
