//! Voxel decoder: tokenizer, residual MLP backbone and the three heads
//! (retrieval, low-level latent, prior). Forward passes cache intermediates;
//! backward passes are composed explicitly by the training loops.

use rand::Rng;

use crate::error::Result;
use crate::fusion::LN_EPS;
use crate::lora::LoraAdapter;
use crate::nn::{Conv2d, Conv2dGrads, Linear, LinearGrads};
use crate::tensor::{ops, Tensor};

pub const BLOCKS: usize = 4;
/// Relative scale of the identity-plus-noise init of the prior head.
pub const PRIOR_INIT_NOISE: f32 = 0.02;
/// Channel width at the root of the low-level upsampler.
const LOW_C0: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderDims {
    pub d_in: usize,
    pub tokens: usize,
    pub token_dim: usize,
    pub latent: [usize; 3],
}

impl DecoderDims {
    pub fn from_run(d: &crate::config::Dims) -> Self {
        DecoderDims {
            d_in: d.decoder_input_dim,
            tokens: d.tokens,
            token_dim: d.token_dim,
            latent: d.latent,
        }
    }

    pub fn flat(&self) -> usize {
        self.tokens * self.token_dim
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub lin1: Linear,
    pub lin2: Linear,
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub lin1: LinearGrads,
    pub lin2: LinearGrads,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub struct BlockCache {
    x: Tensor,
    h1: Tensor,
    a: Tensor,
    s: Tensor,
}

impl ResidualBlock {
    fn init(d: usize, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            lin1: Linear::init(d, d, rng),
            lin2: Linear::init(d, d, rng),
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn zero_grads(&self) -> BlockGrads {
        BlockGrads {
            lin1: self.lin1.zero_grads(),
            lin2: self.lin2.zero_grads(),
            gamma: Tensor::zeros(self.gamma.shape()),
            beta: Tensor::zeros(self.beta.shape()),
        }
    }

    /// y = LayerNorm(x + lin2(gelu(lin1(x))))
    pub fn forward_cached(
        &self,
        x: &Tensor,
        adapters: Option<(&LoraAdapter, &LoraAdapter)>,
    ) -> Result<(Tensor, BlockCache)> {
        let (a1, a2) = match adapters {
            Some((a1, a2)) => (Some(a1), Some(a2)),
            None => (None, None),
        };
        let h1 = self.lin1.forward_adapted(x, a1)?;
        let a = ops::gelu(&h1);
        let h2 = self.lin2.forward_adapted(&a, a2)?;
        let s = ops::add(x, &h2)?;
        let y = ops::layer_norm(&s, &self.gamma, &self.beta, LN_EPS)?;
        Ok((
            y,
            BlockCache {
                x: x.clone(),
                h1,
                a,
                s,
            },
        ))
    }

    pub fn backward(&self, cache: &BlockCache, dy: &Tensor, grads: &mut BlockGrads) -> Result<Tensor> {
        let (ds, dgamma, dbeta) = ops::layer_norm_vjp(&cache.s, &self.gamma, LN_EPS, dy)?;
        ops::axpy(&mut grads.gamma, 1.0, &dgamma)?;
        ops::axpy(&mut grads.beta, 1.0, &dbeta)?;
        let da = self.lin2.vjp(&cache.a, &ds, &mut grads.lin2)?;
        let dh1 = ops::gelu_vjp(&cache.h1, &da)?;
        let dx_branch = self.lin1.vjp(&cache.x, &dh1, &mut grads.lin1)?;
        ops::add(&ds, &dx_branch)
    }

    /// Backward that only trains the adapters; base linears stay frozen.
    pub fn backward_adapted(
        &self,
        cache: &BlockCache,
        dy: &Tensor,
        adapters: (&LoraAdapter, &LoraAdapter),
        adapter_grads: (&mut (Tensor, Tensor), &mut (Tensor, Tensor)),
    ) -> Result<Tensor> {
        let (ds, _, _) = ops::layer_norm_vjp(&cache.s, &self.gamma, LN_EPS, dy)?;
        let da = self
            .lin2
            .vjp_adapted(&cache.a, &ds, adapters.1, adapter_grads.1)?;
        let dh1 = ops::gelu_vjp(&cache.h1, &da)?;
        let dx_branch = self
            .lin1
            .vjp_adapted(&cache.x, &dh1, adapters.0, adapter_grads.0)?;
        ops::add(&ds, &dx_branch)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderWeights {
    pub dims: DecoderDims,
    /// d_in → T·D
    pub tokenizer: Linear,
    pub blocks: Vec<ResidualBlock>,
    /// D → D, rows then L2-normalized
    pub retrieval: Linear,
    /// D → LOW_C0·(h/4)·(w/4)
    pub low_summary: Linear,
    pub low_conv1: Conv2d,
    pub low_conv2: Conv2d,
    /// T·D → T·D, identity-plus-noise init
    pub prior_in: Linear,
    pub prior_hidden: Linear,
    /// zero init so the prior starts as prior_in alone
    pub prior_out: Linear,
}

#[derive(Debug, Clone)]
pub struct DecoderGrads {
    pub tokenizer: LinearGrads,
    pub blocks: Vec<BlockGrads>,
    pub retrieval: LinearGrads,
    pub low_summary: LinearGrads,
    pub low_conv1: Conv2dGrads,
    pub low_conv2: Conv2dGrads,
    pub prior_in: LinearGrads,
    pub prior_hidden: LinearGrads,
    pub prior_out: LinearGrads,
}

impl DecoderWeights {
    pub fn init(dims: DecoderDims, rng: &mut impl Rng) -> Self {
        let d = dims.token_dim;
        let td = dims.flat();
        let [_, lh, lw] = dims.latent;
        assert!(lh % 4 == 0 && lw % 4 == 0, "latent sides must be divisible by 4");
        let q = (lh / 4) * (lw / 4);
        let hidden = (td / 4).max(8);

        // identity plus noise: W = I + σ·N(0,1)/sqrt(T·D)
        let mut prior_in = Linear {
            w: Tensor::randn(&[td, td], PRIOR_INIT_NOISE / (td as f32).sqrt(), rng),
            b: Tensor::zeros(&[td]),
        };
        for i in 0..td {
            prior_in.w.data_mut()[i * td + i] += 1.0;
        }

        DecoderWeights {
            dims,
            tokenizer: Linear::init(dims.d_in, td, rng),
            blocks: (0..BLOCKS).map(|_| ResidualBlock::init(d, rng)).collect(),
            retrieval: Linear::init(d, d, rng),
            low_summary: Linear::init(d, LOW_C0 * q, rng),
            low_conv1: Conv2d::init(LOW_C0, LOW_C0, 3, 1, 1, rng),
            low_conv2: Conv2d::init(LOW_C0, dims.latent[0], 3, 1, 1, rng),
            prior_in,
            prior_hidden: Linear::init(td, hidden, rng),
            prior_out: Linear::zeros(hidden, td),
        }
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            tokenizer: self.tokenizer.zero_grads(),
            blocks: self.blocks.iter().map(|b| b.zero_grads()).collect(),
            retrieval: self.retrieval.zero_grads(),
            low_summary: self.low_summary.zero_grads(),
            low_conv1: self.low_conv1.zero_grads(),
            low_conv2: self.low_conv2.zero_grads(),
            prior_in: self.prior_in.zero_grads(),
            prior_hidden: self.prior_hidden.zero_grads(),
            prior_out: self.prior_out.zero_grads(),
        }
    }

    /// Flat named view of every tensor, for checkpoints and byte-level
    /// freeze checks.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tokenizer.w".into(), &self.tokenizer.w),
            ("tokenizer.b".into(), &self.tokenizer.b),
            ("retrieval.w".into(), &self.retrieval.w),
            ("retrieval.b".into(), &self.retrieval.b),
            ("low_summary.w".into(), &self.low_summary.w),
            ("low_summary.b".into(), &self.low_summary.b),
            ("low_conv1.w".into(), &self.low_conv1.w),
            ("low_conv1.b".into(), &self.low_conv1.b),
            ("low_conv2.w".into(), &self.low_conv2.w),
            ("low_conv2.b".into(), &self.low_conv2.b),
            ("prior_in.w".into(), &self.prior_in.w),
            ("prior_in.b".into(), &self.prior_in.b),
            ("prior_hidden.w".into(), &self.prior_hidden.w),
            ("prior_hidden.b".into(), &self.prior_hidden.b),
            ("prior_out.w".into(), &self.prior_out.w),
            ("prior_out.b".into(), &self.prior_out.b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.lin1.w"), &b.lin1.w));
            out.push((format!("block{i}.lin1.b"), &b.lin1.b));
            out.push((format!("block{i}.lin2.w"), &b.lin2.w));
            out.push((format!("block{i}.lin2.b"), &b.lin2.b));
            out.push((format!("block{i}.gamma"), &b.gamma));
            out.push((format!("block{i}.beta"), &b.beta));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tokenizer.w".into(), &mut self.tokenizer.w),
            ("tokenizer.b".into(), &mut self.tokenizer.b),
            ("retrieval.w".into(), &mut self.retrieval.w),
            ("retrieval.b".into(), &mut self.retrieval.b),
            ("low_summary.w".into(), &mut self.low_summary.w),
            ("low_summary.b".into(), &mut self.low_summary.b),
            ("low_conv1.w".into(), &mut self.low_conv1.w),
            ("low_conv1.b".into(), &mut self.low_conv1.b),
            ("low_conv2.w".into(), &mut self.low_conv2.w),
            ("low_conv2.b".into(), &mut self.low_conv2.b),
            ("prior_in.w".into(), &mut self.prior_in.w),
            ("prior_in.b".into(), &mut self.prior_in.b),
            ("prior_hidden.w".into(), &mut self.prior_hidden.w),
            ("prior_hidden.b".into(), &mut self.prior_hidden.b),
            ("prior_out.w".into(), &mut self.prior_out.w),
            ("prior_out.b".into(), &mut self.prior_out.b),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.lin1.w"), &mut b.lin1.w));
            out.push((format!("block{i}.lin1.b"), &mut b.lin1.b));
            out.push((format!("block{i}.lin2.w"), &mut b.lin2.w));
            out.push((format!("block{i}.lin2.b"), &mut b.lin2.b));
            out.push((format!("block{i}.gamma"), &mut b.gamma));
            out.push((format!("block{i}.beta"), &mut b.beta));
        }
        out
    }
}

/// Adapters attached to the decoder's tokenizer and block linears.
#[derive(Debug, Clone)]
pub struct DecoderAdapters {
    pub tokenizer: Option<LoraAdapter>,
    pub blocks: Vec<(LoraAdapter, LoraAdapter)>,
    pub rank: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttachPoints {
    pub tokenizer: bool,
    pub blocks: bool,
}

impl Default for AttachPoints {
    fn default() -> Self {
        AttachPoints {
            tokenizer: true,
            blocks: true,
        }
    }
}

pub struct DecoderAdapterGrads {
    pub tokenizer: Option<(Tensor, Tensor)>,
    pub blocks: Vec<((Tensor, Tensor), (Tensor, Tensor))>,
}

impl DecoderAdapters {
    pub fn init(
        weights: &DecoderWeights,
        rank: usize,
        attach: AttachPoints,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = weights.dims.token_dim;
        let td = weights.dims.flat();
        let tokenizer = if attach.tokenizer {
            Some(LoraAdapter::init(weights.dims.d_in, td, rank, rng)?)
        } else {
            None
        };
        let blocks = if attach.blocks {
            (0..weights.blocks.len())
                .map(|_| {
                    Ok((
                        LoraAdapter::init(d, d, rank, rng)?,
                        LoraAdapter::init(d, d, rank, rng)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(DecoderAdapters {
            tokenizer,
            blocks,
            rank,
        })
    }

    pub fn zero_grads(&self) -> DecoderAdapterGrads {
        let zero = |a: &LoraAdapter| (Tensor::zeros(a.a.shape()), Tensor::zeros(a.b.shape()));
        DecoderAdapterGrads {
            tokenizer: self.tokenizer.as_ref().map(zero),
            blocks: self
                .blocks
                .iter()
                .map(|(a1, a2)| (zero(a1), zero(a2)))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = self.tokenizer.as_ref().map(|a| a.param_count()).unwrap_or(0);
        for (a1, a2) in &self.blocks {
            n += a1.param_count() + a2.param_count();
        }
        n
    }
}

pub struct DecoderCache {
    pub m: Tensor,
    /// [b·T, D] tokenizer output rows
    pub zrows_in: Tensor,
    pub blocks: Vec<BlockCache>,
    /// [b·T, D] backbone output rows
    pub zrows_out: Tensor,
    pub batch: usize,
}

/// Z = backbone(tokenize(M)); returns [b, T, D].
pub fn decoder_forward(
    w: &DecoderWeights,
    m: &Tensor,
    adapters: Option<&DecoderAdapters>,
) -> Result<(Tensor, DecoderCache)> {
    let b = m.shape()[0];
    let dims = w.dims;
    let tok = w
        .tokenizer
        .forward_adapted(m, adapters.and_then(|a| a.tokenizer.as_ref()))?;
    let mut rows = tok.reshaped(&[b * dims.tokens, dims.token_dim])?;
    let zrows_in = rows.clone();
    let mut caches = Vec::with_capacity(w.blocks.len());
    for (i, block) in w.blocks.iter().enumerate() {
        let ad = adapters.and_then(|a| a.blocks.get(i)).map(|(x, y)| (x, y));
        let (y, cache) = block.forward_cached(&rows, ad)?;
        caches.push(cache);
        rows = y;
    }
    let z = rows.clone().reshaped(&[b, dims.tokens, dims.token_dim])?;
    Ok((
        z,
        DecoderCache {
            m: m.clone(),
            zrows_in,
            blocks: caches,
            zrows_out: rows,
            batch: b,
        },
    ))
}

/// Backward through the backbone. Returns dM and fills `grads`.
pub fn decoder_backward(
    w: &DecoderWeights,
    cache: &DecoderCache,
    d_zrows: &Tensor,
    grads: &mut DecoderGrads,
) -> Result<Tensor> {
    let mut d = d_zrows.clone();
    for i in (0..w.blocks.len()).rev() {
        d = w.blocks[i].backward(&cache.blocks[i], &d, &mut grads.blocks[i])?;
    }
    let d_tok = d.reshaped(&[cache.batch, w.dims.flat()])?;
    w.tokenizer.vjp(&cache.m, &d_tok, &mut grads.tokenizer)
}

/// Backward that trains only the adapters (plus returns dM).
pub fn decoder_backward_adapted(
    w: &DecoderWeights,
    adapters: &DecoderAdapters,
    cache: &DecoderCache,
    d_zrows: &Tensor,
    grads: &mut DecoderAdapterGrads,
) -> Result<Tensor> {
    let mut d = d_zrows.clone();
    for i in (0..w.blocks.len()).rev() {
        let block = &w.blocks[i];
        let bc = &cache.blocks[i];
        if let Some((a1, a2)) = adapters.blocks.get(i) {
            let (g1, g2) = &mut grads.blocks[i];
            d = block.backward_adapted(bc, &d, (a1, a2), (g1, g2))?;
        } else {
            // no adapter on this block: propagate only
            let mut scratch = block.zero_grads();
            d = block.backward(bc, &d, &mut scratch)?;
        }
    }
    let d_tok = d.reshaped(&[cache.batch, w.dims.flat()])?;
    match (&adapters.tokenizer, &mut grads.tokenizer) {
        (Some(a), Some(g)) => w.tokenizer.vjp_adapted(&cache.m, &d_tok, a, g),
        _ => {
            let mut scratch = w.tokenizer.zero_grads();
            w.tokenizer.vjp(&cache.m, &d_tok, &mut scratch)
        }
    }
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

pub struct LowCache {
    mu: Tensor,
    s0: Tensor,
    u1: Tensor,
    c1: Tensor,
    u2: Tensor,
}

pub struct HeadsCache {
    pub zrows: Tensor,
    pub retr_out: Tensor,
    pub e: Tensor,
    pub zflat: Tensor,
    pub prior_h: Tensor,
    pub prior_u: Tensor,
    pub prior_a: Tensor,
    pub low: Vec<LowCache>,
}

pub struct HeadOutputs {
    /// [b, T, D], unit rows.
    pub retrieval: Tensor,
    /// [b, c, h, w]
    pub latent: Tensor,
    /// [b, T, D]
    pub prior: Tensor,
}

pub fn heads_forward(w: &DecoderWeights, z: &Tensor) -> Result<(HeadOutputs, HeadsCache)> {
    let dims = w.dims;
    let b = z.shape()[0];
    let zrows = z.clone().reshaped(&[b * dims.tokens, dims.token_dim])?;

    // retrieval: per-token linear + row normalization
    let retr_out = w.retrieval.forward(&zrows)?;
    let e = ops::l2_normalize_rows(&retr_out);

    // prior: identity-plus-noise linear with a zero-init residual refinement
    let zflat = z.clone().reshaped(&[b, dims.flat()])?;
    let prior_h = w.prior_in.forward(&zflat)?;
    let prior_u = w.prior_hidden.forward(&prior_h)?;
    let prior_a = ops::gelu(&prior_u);
    let prior_r = w.prior_out.forward(&prior_a)?;
    let ghat = ops::add(&prior_h, &prior_r)?;

    // low-level: token mean → MLP → two upsample+conv stages
    let [lc, lh, lw] = dims.latent;
    let (qh, qw) = (lh / 4, lw / 4);
    let mut latent = Tensor::zeros(&[b, lc, lh, lw]);
    let mut low_caches = Vec::with_capacity(b);
    for i in 0..b {
        let rows = Tensor::from_vec(
            &[dims.tokens, dims.token_dim],
            zrows.data()[i * dims.tokens * dims.token_dim..(i + 1) * dims.tokens * dims.token_dim]
                .to_vec(),
        )?;
        let mu = ops::mean_rows(&rows).reshaped(&[1, dims.token_dim])?;
        let s0 = w.low_summary.forward(&mu)?;
        let a0 = ops::gelu(&s0);
        let t0 = a0.reshaped(&[LOW_C0, qh, qw])?;
        let u1 = ops::upsample_nearest2x(&t0)?;
        let c1 = w.low_conv1.forward(&u1)?;
        let a1 = ops::gelu(&c1);
        let u2 = ops::upsample_nearest2x(&a1)?;
        let c2 = w.low_conv2.forward(&u2)?;
        let len = lc * lh * lw;
        latent.data_mut()[i * len..(i + 1) * len].copy_from_slice(c2.data());
        low_caches.push(LowCache { mu, s0, u1, c1, u2 });
    }

    Ok((
        HeadOutputs {
            retrieval: e.clone().reshaped(&[b, dims.tokens, dims.token_dim])?,
            latent,
            prior: ghat.reshaped(&[b, dims.tokens, dims.token_dim])?,
        },
        HeadsCache {
            zrows,
            retr_out,
            e,
            zflat,
            prior_h,
            prior_u,
            prior_a,
            low: low_caches,
        },
    ))
}

/// Backward through the heads. Any of the upstream grads may be None.
/// Returns d(zrows) of shape [b·T, D].
pub fn heads_backward(
    w: &DecoderWeights,
    cache: &HeadsCache,
    d_retrieval: Option<&Tensor>, // [b*T, D] grad w.r.t. normalized rows
    d_latent: Option<&Tensor>,    // [b, c, h, w]
    d_prior: Option<&Tensor>,     // [b, T*D]
    grads: &mut DecoderGrads,
) -> Result<Tensor> {
    let dims = w.dims;
    let b = cache.zflat.shape()[0];
    let mut dz = Tensor::zeros(&[b * dims.tokens, dims.token_dim]);

    if let Some(de) = d_retrieval {
        let d_retr = ops::l2_normalize_rows_vjp(&cache.retr_out, &cache.e, de)?;
        let d = w.retrieval.vjp(&cache.zrows, &d_retr, &mut grads.retrieval)?;
        ops::axpy(&mut dz, 1.0, &d)?;
    }

    if let Some(dg) = d_prior {
        // ghat = h + prior_out(gelu(prior_hidden(h)))
        let mut dh = dg.clone();
        let da = w.prior_out.vjp(&cache.prior_a, dg, &mut grads.prior_out)?;
        let du = ops::gelu_vjp(&cache.prior_u, &da)?;
        let dh2 = w.prior_hidden.vjp(&cache.prior_h, &du, &mut grads.prior_hidden)?;
        ops::axpy(&mut dh, 1.0, &dh2)?;
        let dzflat = w.prior_in.vjp(&cache.zflat, &dh, &mut grads.prior_in)?;
        let d = dzflat.reshaped(&[b * dims.tokens, dims.token_dim])?;
        ops::axpy(&mut dz, 1.0, &d)?;
    }

    if let Some(dl) = d_latent {
        let [lc, lh, lw] = dims.latent;
        let (qh, qw) = (lh / 4, lw / 4);
        let len = lc * lh * lw;
        for i in 0..b {
            let lcache = &cache.low[i];
            let dc2 = Tensor::from_vec(
                &[lc, lh, lw],
                dl.data()[i * len..(i + 1) * len].to_vec(),
            )?;
            let du2 = w.low_conv2.vjp(&lcache.u2, &dc2, &mut grads.low_conv2)?;
            let da1 = ops::upsample_nearest2x_vjp(&[LOW_C0, 2 * qh, 2 * qw], &du2)?;
            let dc1 = ops::gelu_vjp(&lcache.c1, &da1)?;
            let du1 = w.low_conv1.vjp(&lcache.u1, &dc1, &mut grads.low_conv1)?;
            let dt0 = ops::upsample_nearest2x_vjp(&[LOW_C0, qh, qw], &du1)?;
            let da0 = dt0.reshaped(&[1, LOW_C0 * qh * qw])?;
            let ds0 = ops::gelu_vjp(&lcache.s0.clone(), &da0)?;
            let dmu = w.low_summary.vjp(&lcache.mu, &ds0, &mut grads.low_summary)?;
            let drows = ops::mean_rows_vjp(
                &[dims.tokens, dims.token_dim],
                &dmu.reshaped(&[dims.token_dim])?,
            );
            for (dst, &src) in dz.data_mut()
                [i * dims.tokens * dims.token_dim..(i + 1) * dims.tokens * dims.token_dim]
                .iter_mut()
                .zip(drows.data())
            {
                *dst += src;
            }
        }
    }

    Ok(dz)
}
