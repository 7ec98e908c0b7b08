//! Architectural units and the full feature-fused network.
//!
//! Layers register their parameters in a [`ParamStore`] at construction
//! and read them back through a [`LayerCtx`] during the forward pass.
//! Forward passes take `&self`; batch-norm running statistics computed in
//! train mode are returned as [`BnUpdate`]s and applied with
//! [`FfceNet::apply_bn_updates`], so one model can serve concurrent
//! evaluations.

use alloc::{format, string::String, vec, vec::Vec};

use num_traits::Float;
use rand_core::RngCore;

use crate::{
    error::{Error, Result},
    graph::{Graph, Mode, Var},
    params::{BufferId, ParamId, ParamStore},
    scalar::Scalar,
    tensor::Tensor,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_classes: usize,
    pub stack_depth: usize,
    pub channels: usize,
    pub num_enc_blocks: usize,
    pub num_dec_blocks: usize,
    pub codewords: usize,
    pub dropout_rate: f64,
    pub scse_reduction: usize,
    pub kernel_size: usize,
    /// Feed the depth-as-channel stack through the spatial encoder and fuse
    /// it at the bottleneck. `false` gives the 2D-only ablation.
    pub fuse_spatial: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            num_classes: 28,
            stack_depth: 10,
            channels: 64,
            num_enc_blocks: 4,
            num_dec_blocks: 4,
            codewords: 32,
            dropout_rate: 0.1,
            scse_reduction: 2,
            kernel_size: 5,
            fuse_spatial: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.stack_depth == 0 {
            return bad("stack depth must be at least 1".into());
        }
        if self.channels == 0 || self.scse_reduction == 0 || !self.channels.is_multiple_of(self.scse_reduction) {
            return bad(format!(
                "channels {} must be a positive multiple of the sc-SE reduction {}",
                self.channels, self.scse_reduction
            ));
        }
        if self.num_enc_blocks == 0 || self.num_dec_blocks != self.num_enc_blocks {
            return bad(format!(
                "decoder blocks ({}) must equal encoder blocks ({})",
                self.num_dec_blocks, self.num_enc_blocks
            ));
        }
        if self.codewords == 0 {
            return bad("need at least one codeword".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.num_enc_blocks
    }
}

fn uniform<R: RngCore + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * u - 1.0) * bound
}

fn kaiming<T: Scalar, R: RngCore + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = Float::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(shape.to_vec(), |_| T::from_f64_lossy(uniform(rng, bound)))
}

/// Pending running-statistics update from one train-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    mean_id: BufferId,
    var_id: BufferId,
    mean: Vec<T>,
    var: Vec<T>,
    count: usize,
}

/// Applies running-statistic updates (`momentum` 0.1, unbiased variance).
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        let unbias = if u.count > 1 {
            T::from_usize(u.count).unwrap() / T::from_usize(u.count - 1).unwrap()
        } else {
            T::one()
        };
        for (r, &b) in store.buffer_mut(u.mean_id).data_mut().iter_mut().zip(&u.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.buffer_mut(u.var_id).data_mut().iter_mut().zip(&u.var) {
            *r = keep * *r + m * b * unbias;
        }
    }
}

/// Forward-pass context: the graph, bound parameter vars, mode and RNG.
pub struct LayerCtx<'a, T, R: ?Sized> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    vars: &'a [Var],
    mode: Mode,
    rng: &'a mut R,
    dropout_rate: f64,
    updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Scalar, R: RngCore + ?Sized> LayerCtx<'a, T, R> {
    pub fn new(
        graph: &'a mut Graph<T>,
        store: &'a ParamStore<T>,
        vars: &'a [Var],
        mode: Mode,
        rng: &'a mut R,
        dropout_rate: f64,
    ) -> Self {
        Self {
            graph,
            store,
            vars,
            mode,
            rng,
            dropout_rate,
            updates: Vec::new(),
        }
    }

    fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn into_updates(self) -> Vec<BnUpdate<T>> {
        self.updates
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let (rate, mode) = (self.dropout_rate, self.mode);
        self.graph.dropout(x, rate, mode, self.rng)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    scale: ParamId,
    shift: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            scale: store.add_param(format!("{prefix}.scale"), Tensor::ones([channels]))?,
            shift: store.add_param(format!("{prefix}.shift"), Tensor::zeros([channels]))?,
            mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels]))?,
            var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones([channels]))?,
        })
    }

    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, x: Var) -> Result<Var> {
        let (scale, shift) = (ctx.p(self.scale), ctx.p(self.shift));
        let eps = T::from_f64_lossy(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let [n, _, h, w] = ctx.graph.value(x).dims4("batchnorm2d")?;
                let (y, mean, var) = ctx.graph.batchnorm_train(x, scale, shift, eps)?;
                ctx.updates.push(BnUpdate {
                    mean_id: self.mean,
                    var_id: self.var,
                    mean,
                    var,
                    count: n * h * w,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                ctx.graph.batchnorm_eval(
                    x,
                    scale,
                    shift,
                    store.buffer(self.mean).data(),
                    store.buffer(self.var).data(),
                    eps,
                )
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    kernel: ParamId,
    bias: Option<ParamId>,
    pad: usize,
}

impl Conv {
    pub fn new<T: Scalar, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        [cin, cout, k]: [usize; 3],
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let kernel = store.add_param(
            format!("{prefix}.kernel"),
            kaiming(rng, &[cout, cin, k, k], cin * k * k),
        )?;
        let bias = if bias {
            Some(store.add_param(format!("{prefix}.bias"), Tensor::zeros([cout]))?)
        } else {
            None
        };
        Ok(Self {
            kernel,
            bias,
            pad: k / 2,
        })
    }

    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, x: Var) -> Result<Var> {
        let (k, b) = (ctx.p(self.kernel), self.bias.map(|b| ctx.p(b)));
        ctx.graph.conv2d(x, k, b, 1, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fin: usize,
        fout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add_param(format!("{prefix}.weight"), kaiming(rng, &[fout, fin], fin))?,
            bias: store.add_param(format!("{prefix}.bias"), Tensor::zeros([fout]))?,
        })
    }

    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        ctx.graph.linear(x, w, Some(b))
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }
}

/// Concurrent spatial and channel squeeze-and-excitation, branches
/// combined by elementwise maximum.
#[derive(Debug, Clone)]
pub struct Scse {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv,
}

impl Scse {
    pub fn new<T: Scalar, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "sc-SE reduction {reduction} does not divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), channels, hidden, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), hidden, channels, rng)?,
            spatial: Conv::new(store, &format!("{prefix}.spatial"), [channels, 1, 1], true, rng)?,
        })
    }

    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, x: Var) -> Result<Var> {
        let [n, c, _, _] = ctx.graph.value(x).dims4("scse")?;
        // channel branch
        let pooled = ctx.graph.mean(x, &[2, 3])?;
        let pooled = ctx.graph.reshape(pooled, [n, c])?;
        let hidden = self.fc1.forward(ctx, pooled)?;
        let hidden = ctx.graph.relu(hidden)?;
        let excite = self.fc2.forward(ctx, hidden)?;
        let gate = ctx.graph.sigmoid(excite)?;
        let gate = ctx.graph.reshape(gate, [n, c, 1, 1])?;
        let channel = ctx.graph.mul(x, gate)?;
        // spatial branch
        let squeeze = self.spatial.forward(ctx, x)?;
        let sgate = ctx.graph.sigmoid(squeeze)?;
        let spatial = ctx.graph.mul(x, sgate)?;
        ctx.graph.maximum(channel, spatial)
    }
}

/// Densely connected block: BN→ReLU→k×k conv, concatenated with the
/// block input, BN→ReLU→k×k conv, concatenated with everything so far,
/// BN→ReLU→1×1 conv to `channels`, then sc-SE and dropout.
#[derive(Debug, Clone)]
pub struct DenseBlock {
    bn1: BatchNorm,
    conv1: Conv,
    bn2: BatchNorm,
    conv2: Conv,
    bn3: BatchNorm,
    conv3: Conv,
    scse: Scse,
}

impl DenseBlock {
    pub fn new<T: Scalar, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        config: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, k) = (config.channels, config.kernel_size);
        Ok(Self {
            bn1: BatchNorm::new(store, &format!("{prefix}.bn1"), cin)?,
            conv1: Conv::new(store, &format!("{prefix}.conv1"), [cin, c, k], false, rng)?,
            bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), cin + c)?,
            conv2: Conv::new(store, &format!("{prefix}.conv2"), [cin + c, c, k], false, rng)?,
            bn3: BatchNorm::new(store, &format!("{prefix}.bn3"), cin + 2 * c)?,
            conv3: Conv::new(store, &format!("{prefix}.conv3"), [cin + 2 * c, c, 1], true, rng)?,
            scse: Scse::new(store, &format!("{prefix}.scse"), c, config.scse_reduction, rng)?,
        })
    }

    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, x: Var) -> Result<Var> {
        let h = self.bn1.forward(ctx, x)?;
        let h = ctx.graph.relu(h)?;
        let o1 = self.conv1.forward(ctx, h)?;
        let cat1 = ctx.graph.concat_channels(&[x, o1])?;
        let h = self.bn2.forward(ctx, cat1)?;
        let h = ctx.graph.relu(h)?;
        let o2 = self.conv2.forward(ctx, h)?;
        let cat2 = ctx.graph.concat_channels(&[x, o1, o2])?;
        let h = self.bn3.forward(ctx, cat2)?;
        let h = ctx.graph.relu(h)?;
        let out = self.conv3.forward(ctx, h)?;
        let out = self.scse.forward(ctx, out)?;
        ctx.dropout(out)
    }
}

/// Residual encoding against learned codewords with positive smoothing
/// factors (stored as logarithms).
#[derive(Debug, Clone)]
pub struct EncodingLayer {
    codewords: ParamId,
    smoothing: ParamId,
}

impl EncodingLayer {
    pub fn new<T: Scalar, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        codewords: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / Float::sqrt(codewords as f64);
        let d = Tensor::from_fn([codewords, channels], |_| T::from_f64_lossy(uniform(rng, bound)));
        // s ~ U(0, 1], stored as ln s
        let s = Tensor::from_fn([codewords], |_| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            T::from_f64_lossy(Float::ln(1.0 - u))
        });
        Ok(Self {
            codewords: store.add_param(format!("{prefix}.codewords"), d)?,
            smoothing: store.add_param(format!("{prefix}.smoothing"), s)?,
        })
    }

    /// `e = relu(mean_k Σ_i a_ik (x_i − d_k))`, N×C.
    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, x: Var) -> Result<Var> {
        let (d, s) = (ctx.p(self.codewords), ctx.p(self.smoothing));
        let agg = ctx.graph.encoding(x, d, s)?;
        ctx.graph.relu(agg)
    }

    pub fn codewords_id(&self) -> ParamId {
        self.codewords
    }

    pub fn smoothing_id(&self) -> ParamId {
        self.smoothing
    }
}

/// Fully connected head mapping the encoding to per-class logits and the
/// sigmoid scaling factor.
#[derive(Debug, Clone)]
pub struct ContextHead {
    fc: Linear,
}

impl ContextHead {
    pub fn new<T: Scalar, R: RngCore + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc: Linear::new(store, &format!("{prefix}.fc"), channels, classes, rng)?,
        })
    }

    /// Returns `(gamma, sec_logits)`, both N×L.
    pub fn forward<T: Scalar, R: RngCore + ?Sized>(&self, ctx: &mut LayerCtx<'_, T, R>, e: Var) -> Result<(Var, Var)> {
        let logits = self.fc.forward(ctx, e)?;
        let gamma = ctx.graph.sigmoid(logits)?;
        Ok((gamma, logits))
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }
}

/// Network inputs for a batch: the coronal slices (N×1×H×W) and the
/// depth-as-channel stacks (N×S×H×W, required when fusing).
#[derive(Debug, Clone, Copy)]
pub struct ForwardInputs<'a, T> {
    pub slice: &'a Tensor<T>,
    pub stack: Option<&'a Tensor<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<T> {
    /// Replaces the learned scaling factor by a fixed per-class vector.
    pub gamma_override: Option<Vec<T>>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Classifier output before recalibration, N×L×H×W.
    pub features: Var,
    /// Recalibrated logits `features ⊗ gamma`, N×L×H×W.
    pub logits: Var,
    /// Scaling factor, N×L.
    pub gamma: Var,
    /// Pre-sigmoid class-presence logits, N×L.
    pub sec_logits: Var,
    /// Softmax over classes of `logits`, N×L×H×W.
    pub probs: Var,
}

/// Result of [`FfceNet::forward`]: output handles, the parameter vars
/// (indexed like the store) and pending batch-norm updates.
pub struct Forward<T> {
    pub out: ForwardOutput,
    pub param_vars: Vec<Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

#[derive(Debug, Clone)]
struct Layout {
    enc2d: Vec<DenseBlock>,
    enc_spatial: Vec<DenseBlock>,
    fusion_scse: Scse,
    fusion_conv: Conv,
    bottleneck: DenseBlock,
    encoding: EncodingLayer,
    context: ContextHead,
    decoder: Vec<DenseBlock>,
    classifier: Conv,
}

/// The feature-fused context-encoding network: parameters, buffers and
/// architecture.
#[derive(Debug, Clone)]
pub struct FfceNet<T> {
    config: NetworkConfig,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> FfceNet<T> {
    pub fn new<R: RngCore + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.channels;
        let s = &mut store;
        let mut enc2d = Vec::new();
        let mut enc_spatial = Vec::new();
        for b in 0..config.num_enc_blocks {
            let cin = if b == 0 { 1 } else { c };
            enc2d.push(DenseBlock::new(s, &format!("enc2d.block{b}"), cin, &config, rng)?);
        }
        if config.fuse_spatial {
            for b in 0..config.num_enc_blocks {
                let cin = if b == 0 { config.stack_depth } else { c };
                enc_spatial.push(DenseBlock::new(s, &format!("enc_spatial.block{b}"), cin, &config, rng)?);
            }
        }
        let fused = if config.fuse_spatial { 2 * c } else { c };
        let fusion_scse = Scse::new(s, "fusion.scse", fused, config.scse_reduction, rng)?;
        let fusion_conv = Conv::new(s, "fusion.conv", [fused, c, 1], false, rng)?;
        let bottleneck = DenseBlock::new(s, "bottleneck", c, &config, rng)?;
        let encoding = EncodingLayer::new(s, "encoding", c, config.codewords, rng)?;
        let context = ContextHead::new(s, "context", c, config.num_classes, rng)?;
        let mut decoder = Vec::new();
        for b in 0..config.num_dec_blocks {
            decoder.push(DenseBlock::new(s, &format!("decoder.block{b}"), 2 * c, &config, rng)?);
        }
        let classifier = Conv::new(s, "classifier", [c, config.num_classes, 1], true, rng)?;
        let layout = Layout {
            enc2d,
            enc_spatial,
            fusion_scse,
            fusion_conv,
            bottleneck,
            encoding,
            context,
            decoder,
            classifier,
        };
        Ok(Self { config, store, layout })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) {
        apply_bn_updates(&mut self.store, updates);
    }

    /// Same architecture and values in another precision.
    pub fn cast<U: Scalar>(&self) -> FfceNet<U> {
        FfceNet {
            config: self.config.clone(),
            store: self.store.cast(),
            layout: self.layout.clone(),
        }
    }

    fn check_inputs(&self, inputs: &ForwardInputs<'_, T>) -> Result<[usize; 3]> {
        let [n, c, h, w] = inputs.slice.dims4("ffce_forward")?;
        if c != 1 {
            return Err(Error::ShapeMismatch {
                op: "ffce_forward slice",
                left: vec![n, 1, h, w],
                right: inputs.slice.shape().to_vec(),
            });
        }
        let div = self.config.spatial_divisor();
        for extent in [h, w] {
            if extent == 0 || extent % div != 0 {
                return Err(Error::Indivisible {
                    op: "ffce_forward",
                    extent,
                    divisor: div,
                });
            }
        }
        if self.config.fuse_spatial {
            let stack = inputs
                .stack
                .ok_or_else(|| Error::InvalidArgument("fused network needs a depth-as-channel stack".into()))?;
            let expected = [n, self.config.stack_depth, h, w];
            if stack.shape() != expected {
                return Err(Error::ShapeMismatch {
                    op: "ffce_forward stack",
                    left: expected.to_vec(),
                    right: stack.shape().to_vec(),
                });
            }
        }
        Ok([n, h, w])
    }

    /// Records the full forward pass on `graph`.
    pub fn forward<R: RngCore + ?Sized>(
        &self,
        graph: &mut Graph<T>,
        inputs: ForwardInputs<'_, T>,
        mode: Mode,
        rng: &mut R,
        options: &ForwardOptions<T>,
    ) -> Result<Forward<T>> {
        let [n, _, _] = self.check_inputs(&inputs)?;
        let l = self.config.num_classes;
        if let Some(g) = &options.gamma_override {
            if g.len() != l {
                return Err(Error::ShapeMismatch {
                    op: "gamma override",
                    left: vec![l],
                    right: vec![g.len()],
                });
            }
        }
        let param_vars = self.store.bind(graph);
        let slice = graph.constant(inputs.slice.clone());
        let stack = if self.config.fuse_spatial {
            inputs.stack.map(|s| graph.constant(s.clone()))
        } else {
            None
        };
        let lay = &self.layout;
        let mut ctx = LayerCtx::new(graph, &self.store, &param_vars, mode, rng, self.config.dropout_rate);

        let mut skips = Vec::with_capacity(lay.enc2d.len());
        let mut x = slice;
        for block in &lay.enc2d {
            x = block.forward(&mut ctx, x)?;
            skips.push(x);
            x = ctx.graph.maxpool2d(x, 2)?;
        }
        let fused = match stack {
            Some(mut y) => {
                for block in &lay.enc_spatial {
                    y = block.forward(&mut ctx, y)?;
                    y = ctx.graph.maxpool2d(y, 2)?;
                }
                ctx.graph.concat_channels(&[x, y])?
            }
            None => x,
        };
        let fused = lay.fusion_scse.forward(&mut ctx, fused)?;
        let fused = lay.fusion_conv.forward(&mut ctx, fused)?;
        let bottleneck = lay.bottleneck.forward(&mut ctx, fused)?;

        let e = lay.encoding.forward(&mut ctx, bottleneck)?;
        let (gamma, sec_logits) = lay.context.forward(&mut ctx, e)?;

        let mut x = bottleneck;
        for (block, &skip) in lay.decoder.iter().zip(skips.iter().rev()) {
            let up = ctx.graph.upsample_bilinear2x(x)?;
            let cat = ctx.graph.concat_channels(&[up, skip])?;
            x = block.forward(&mut ctx, cat)?;
        }
        let features = lay.classifier.forward(&mut ctx, x)?;
        let scale = match &options.gamma_override {
            Some(g) => ctx.graph.constant(Tensor::new([1, l, 1, 1], g.clone())?),
            None => ctx.graph.reshape(gamma, [n, l, 1, 1])?,
        };
        let logits = ctx.graph.mul(features, scale)?;
        let probs = ctx.graph.softmax_channels(logits)?;
        let bn_updates = ctx.into_updates();
        Ok(Forward {
            out: ForwardOutput {
                features,
                logits,
                gamma,
                sec_logits,
                probs,
            },
            param_vars,
            bn_updates,
        })
    }
}

/// Per-pixel argmax over classes of an N×L×H×W map; ties go to the lowest
/// class index.
pub fn argmax_classes<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<u16>> {
    let [n, l, h, w] = probs.dims4("argmax_classes")?;
    let plane = h * w;
    let p = probs.data();
    let mut out = Vec::with_capacity(n * plane);
    for s in 0..n {
        for q in 0..plane {
            let mut best = 0;
            for c in 1..l {
                if p[(s * l + c) * plane + q] > p[(s * l + best) * plane + q] {
                    best = c;
                }
            }
            out.push(best as u16);
        }
    }
    Ok(out)
}
