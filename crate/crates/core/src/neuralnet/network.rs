use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    bce_with_logits, count_flops, mse, shape_err, Adam, BatchNorm1d, Conv1d, Dense, GlobalAvgPool, LayerDesc,
    MaxPool1d, NetError, Relu, Scalar, Tensor3, Upsample1d,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Encoder plus classification head.
    #[default]
    Cnn,
    /// Encoder, classification head and reconstruction decoder, trained on
    /// both losses.
    SupConvAe,
    /// Encoder and decoder trained on reconstruction only.
    UnsupAe,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Cnn, ModelKind::SupConvAe, ModelKind::UnsupAe];

    pub fn has_head(self) -> bool {
        self != ModelKind::UnsupAe
    }

    pub fn has_decoder(self) -> bool {
        self != ModelKind::Cnn
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::SupConvAe => "sup_conv_ae",
            ModelKind::UnsupAe => "unsup_ae",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown model kind {s:?}"))
    }
}

/// Network topology. Each encoder block is conv -> ReLU -> max pool ->
/// batch norm; the blocks are followed by global average pooling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub input_len: usize,
    pub conv_widths: Vec<usize>,
    pub dense_widths: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl ArchSpec {
    pub fn new(kind: ModelKind, in_channels: usize, input_len: usize) -> Self {
        Self {
            kind,
            in_channels,
            input_len,
            conv_widths: vec![16, 32, 64, 128],
            dense_widths: vec![32, 16, 16],
            kernel: 9,
            padding: 1,
            pool_kernel: 4,
            pool_stride: 2,
        }
    }

    /// Input length of every encoder block followed by the final length.
    pub fn stage_lengths(&self) -> Result<Vec<usize>, NetError> {
        let bad = |m: String| Err(NetError::InvalidArchitecture(m));
        if self.in_channels == 0 || self.input_len == 0 {
            return bad("empty input shape".into());
        }
        if self.conv_widths.is_empty() || self.conv_widths.contains(&0) || self.dense_widths.contains(&0) {
            return bad(format!("bad widths {:?} / {:?}", self.conv_widths, self.dense_widths));
        }
        if self.kernel == 0 || self.pool_kernel == 0 || self.pool_stride == 0 {
            return bad("zero kernel or stride".into());
        }
        let mut lens = vec![self.input_len];
        let mut l = self.input_len;
        for _ in &self.conv_widths {
            let conv = (l + 2 * self.padding).checked_sub(self.kernel).map(|v| v + 1);
            let pooled = conv.and_then(|c| c.checked_sub(self.pool_kernel)).map(|v| v / self.pool_stride + 1);
            match pooled {
                Some(p) => l = p,
                None => return bad(format!("input length {} too short for the encoder", self.input_len)),
            }
            lens.push(l);
        }
        Ok(lens)
    }

    pub fn latent_dim(&self) -> usize {
        *self.conv_widths.last().unwrap_or(&0)
    }

    fn encoder_descs(&self) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        let mut cin = self.in_channels;
        for &w in &self.conv_widths {
            out.push(LayerDesc::Conv { in_channels: cin, out_channels: w, kernel: self.kernel, padding: self.padding });
            out.push(LayerDesc::Relu);
            out.push(LayerDesc::MaxPool { kernel: self.pool_kernel, stride: self.pool_stride });
            out.push(LayerDesc::BatchNorm);
            cin = w;
        }
        out.push(LayerDesc::GlobalAvgPool);
        out
    }

    fn head_descs(&self) -> Vec<LayerDesc> {
        let mut out = Vec::new();
        let mut n = self.latent_dim();
        for &w in &self.dense_widths {
            out.push(LayerDesc::Dense { inputs: n, outputs: w });
            out.push(LayerDesc::Relu);
            n = w;
        }
        out.push(LayerDesc::Dense { inputs: n, outputs: 1 });
        out
    }

    fn decoder_descs(&self) -> Result<Vec<LayerDesc>, NetError> {
        let lens = self.stage_lengths()?;
        let latent = self.latent_dim();
        let last = *lens.last().expect("non-empty");
        let mut out = vec![
            LayerDesc::Dense { inputs: latent, outputs: latent * last },
            LayerDesc::Relu,
            LayerDesc::Reshape { channels: latent, len: last },
        ];
        for (j, (cin, cout, target)) in self.decoder_plan(&lens).into_iter().enumerate() {
            out.push(LayerDesc::Upsample { target: target + self.kernel - 1 - 2 * self.padding });
            out.push(LayerDesc::Conv { in_channels: cin, out_channels: cout, kernel: self.kernel, padding: self.padding });
            if j + 1 < self.conv_widths.len() {
                out.push(LayerDesc::Relu);
            }
        }
        Ok(out)
    }

    /// `(in, out, output length)` of each decoder block, mirroring the
    /// encoder.
    fn decoder_plan(&self, lens: &[usize]) -> Vec<(usize, usize, usize)> {
        let n = self.conv_widths.len();
        (0..n)
            .map(|j| {
                let i = n - 1 - j;
                let cin = self.conv_widths[i];
                let cout = if i == 0 { self.in_channels } else { self.conv_widths[i - 1] };
                (cin, cout, lens[i])
            })
            .collect()
    }

    /// Operations for one forward pass of one sample.
    pub fn flops(&self) -> Result<u64, NetError> {
        self.stage_lengths()?;
        let mut total = count_flops(&self.encoder_descs(), (self.in_channels, self.input_len));
        if self.kind.has_head() {
            total += count_flops(&self.head_descs(), (self.latent_dim(), 1));
        }
        if self.kind.has_decoder() {
            total += count_flops(&self.decoder_descs()?, (self.latent_dim(), 1));
        }
        Ok(total)
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock<T> {
    conv: Conv1d<T>,
    relu: Relu,
    pool: MaxPool1d,
    bn: BatchNorm1d<T>,
}

#[derive(Debug, Clone)]
struct DecoderBlock<T> {
    up: Upsample1d,
    conv: Conv1d<T>,
    relu: Option<Relu>,
}

#[derive(Debug, Clone)]
struct Decoder<T> {
    dense: Dense<T>,
    relu: Relu,
    channels: usize,
    len: usize,
    blocks: Vec<DecoderBlock<T>>,
}

#[derive(Debug, Clone)]
struct Head<T> {
    layers: Vec<Dense<T>>,
    relus: Vec<Relu>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Conv,
    Dense,
}

pub struct ParamRef<'a, T> {
    pub group: ParamGroup,
    pub value: &'a mut Vec<T>,
    pub grad: &'a mut Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkOutput<T> {
    /// One logit per sample when the model has a classification head.
    pub logits: Option<Vec<T>>,
    pub reconstruction: Option<Tensor3<T>>,
    /// `(batch, latent_dim)` row-major.
    pub latent: Vec<T>,
}

/// Weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pos_weight: f64,
    pub classification: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pos_weight: 1.0,
            classification: 1.0,
            reconstruction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub bce: Option<f64>,
    pub mse: Option<f64>,
}

/// Upstream gradients for [`Network::backward`].
#[derive(Debug, Clone)]
pub struct LossGrads<T> {
    pub logits: Option<Vec<T>>,
    pub reconstruction: Option<Tensor3<T>>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    arch: ArchSpec,
    blocks: Vec<EncoderBlock<T>>,
    gap: GlobalAvgPool,
    head: Option<Head<T>>,
    decoder: Option<Decoder<T>>,
    cached_batch: Option<usize>,
}

impl<T: Scalar> Network<T> {
    pub fn new<R: Rng + ?Sized>(arch: ArchSpec, rng: &mut R) -> Result<Self, NetError> {
        let lens = arch.stage_lengths()?;
        let mut blocks = Vec::new();
        let mut cin = arch.in_channels;
        for &w in &arch.conv_widths {
            blocks.push(EncoderBlock {
                conv: Conv1d::new(cin, w, arch.kernel, arch.padding, rng),
                relu: Relu::new(),
                pool: MaxPool1d::new(arch.pool_kernel, arch.pool_stride),
                bn: BatchNorm1d::new(w),
            });
            cin = w;
        }
        let latent = arch.latent_dim();
        let head = arch.kind.has_head().then(|| {
            let mut layers = Vec::new();
            let mut n = latent;
            for &w in &arch.dense_widths {
                layers.push(Dense::new(n, w, rng));
                n = w;
            }
            layers.push(Dense::new(n, 1, rng));
            Head {
                relus: vec![Relu::new(); arch.dense_widths.len()],
                layers,
            }
        });
        let decoder = arch.kind.has_decoder().then(|| {
            let last = *lens.last().expect("non-empty");
            let plan = arch.decoder_plan(&lens);
            let n = plan.len();
            let dense = Dense::new(latent, latent * last, rng);
            let blocks = plan
                .into_iter()
                .enumerate()
                .map(|(j, (ci, co, target))| DecoderBlock {
                    up: Upsample1d::new(target + arch.kernel - 1 - 2 * arch.padding),
                    conv: Conv1d::new(ci, co, arch.kernel, arch.padding, rng),
                    relu: (j + 1 < n).then(Relu::new),
                })
                .collect();
            Decoder {
                dense,
                relu: Relu::new(),
                channels: latent,
                len: last,
                blocks,
            }
        });
        Ok(Self {
            arch,
            blocks,
            gap: GlobalAvgPool::new(),
            head,
            decoder,
            cached_batch: None,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn kind(&self) -> ModelKind {
        self.arch.kind
    }

    /// `train` uses batch statistics, updates running statistics and caches
    /// everything needed by [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor3<T>, train: bool) -> Result<NetworkOutput<T>, NetError> {
        if x.channels != self.arch.in_channels || x.len != self.arch.input_len {
            return shape_err(format!(
                "network expects (_, {}, {}), got {:?}",
                self.arch.in_channels,
                self.arch.input_len,
                x.shape()
            ));
        }
        self.cached_batch = None;
        let batch = x.batch;
        let mut h = x.clone();
        for block in &mut self.blocks {
            h = block.conv.forward(&h, train)?;
            h = block.relu.forward(&h, train);
            h = block.pool.forward(&h, train)?;
            h = block.bn.forward(&h, train, train)?;
        }
        let latent = self.gap.forward(&h, train).data;
        let logits = match &mut self.head {
            Some(head) => {
                let mut z = latent.clone();
                for (i, layer) in head.layers.iter_mut().enumerate() {
                    z = layer.forward(&z, batch, train)?;
                    if let Some(relu) = head.relus.get_mut(i) {
                        let t = Tensor3::from_vec(z, batch, layer.outputs, 1)?;
                        z = relu.forward(&t, train).data;
                    }
                }
                Some(z)
            }
            None => None,
        };
        let reconstruction = match &mut self.decoder {
            Some(dec) => {
                let d = dec.dense.forward(&latent, batch, train)?;
                let d = Tensor3::from_vec(d, batch, dec.channels * dec.len, 1)?;
                let d = dec.relu.forward(&d, train);
                let mut r = Tensor3::from_vec(d.data, batch, dec.channels, dec.len)?;
                for block in &mut dec.blocks {
                    r = block.up.forward(&r, train);
                    r = block.conv.forward(&r, train)?;
                    if let Some(relu) = &mut block.relu {
                        r = relu.forward(&r, train);
                    }
                }
                Some(r)
            }
            None => None,
        };
        if train {
            self.cached_batch = Some(batch);
        }
        Ok(NetworkOutput {
            logits,
            reconstruction,
            latent,
        })
    }

    /// Backpropagates the given upstream gradients through the cached
    /// forward pass, accumulating parameter gradients. Returns the gradient
    /// with respect to the input.
    pub fn backward(&mut self, grads: &LossGrads<T>) -> Result<Tensor3<T>, NetError> {
        let batch = self.cached_batch.take().ok_or(NetError::StaleCache)?;
        let latent_dim = self.arch.latent_dim();
        let mut d_latent = vec![T::zero(); batch * latent_dim];
        if let (Some(head), Some(dz)) = (&mut self.head, &grads.logits) {
            if dz.len() != batch {
                return shape_err(format!("{} logit gradients for batch {batch}", dz.len()));
            }
            let mut g = dz.clone();
            for i in (0..head.layers.len()).rev() {
                if let Some(relu) = head.relus.get_mut(i) {
                    let t = Tensor3::from_vec(g, batch, head.layers[i].outputs, 1)?;
                    g = relu.backward(&t)?.data;
                }
                g = head.layers[i].backward(&g)?;
            }
            d_latent.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
        if let (Some(dec), Some(dr)) = (&mut self.decoder, &grads.reconstruction) {
            if dr.shape() != (batch, self.arch.in_channels, self.arch.input_len) {
                return shape_err(format!("reconstruction gradient {:?}", dr.shape()));
            }
            let mut g = dr.clone();
            for block in dec.blocks.iter_mut().rev() {
                if let Some(relu) = &mut block.relu {
                    g = relu.backward(&g)?;
                }
                g = block.conv.backward(&g)?;
                g = block.up.backward(&g)?;
            }
            let g = Tensor3::from_vec(g.data, batch, dec.channels * dec.len, 1)?;
            let g = dec.relu.backward(&g)?;
            let g = dec.dense.backward(&g.data)?;
            d_latent.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
        }
        let mut g = self.gap.backward(&Tensor3::from_vec(d_latent, batch, latent_dim, 1)?)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.bn.backward(&g)?;
            g = block.pool.backward(&g)?;
            g = block.relu.backward(&g)?;
            g = block.conv.backward(&g)?;
        }
        Ok(g)
    }

    /// Loss of a forward output and the matching upstream gradients.
    /// Classifier: BCE. Supervised autoencoder: weighted BCE plus weighted
    /// MSE. Unsupervised autoencoder: MSE.
    pub fn loss(
        &self,
        out: &NetworkOutput<T>,
        input: &Tensor3<T>,
        targets: Option<&[T]>,
        weights: &LossWeights,
    ) -> Result<(LossParts, LossGrads<T>), NetError> {
        let kind = self.arch.kind;
        let mut parts = LossParts {
            total: 0.0,
            bce: None,
            mse: None,
        };
        let mut grads = LossGrads {
            logits: None,
            reconstruction: None,
        };
        if let Some(logits) = &out.logits {
            let targets = targets.ok_or_else(|| NetError::ShapeError("classification targets missing".into()))?;
            let (l, mut g) = bce_with_logits(logits, targets, weights.pos_weight)?;
            let scale = if kind == ModelKind::Cnn { 1.0 } else { weights.classification };
            if scale != 1.0 {
                g.iter_mut().for_each(|v| *v *= T::of(scale));
            }
            parts.bce = Some(l);
            grads.logits = Some(g);
        }
        if let Some(recon) = &out.reconstruction {
            recon.same_shape(input, "reconstruction")?;
            let (l, mut g) = mse(&recon.data, &input.data)?;
            let scale = if kind == ModelKind::UnsupAe { 1.0 } else { weights.reconstruction };
            if scale != 1.0 {
                g.iter_mut().for_each(|v| *v *= T::of(scale));
            }
            parts.mse = Some(l);
            grads.reconstruction = Some(Tensor3::from_vec(g, recon.batch, recon.channels, recon.len)?);
        }
        parts.total = match kind {
            ModelKind::Cnn => parts.bce.unwrap_or(0.0),
            ModelKind::UnsupAe => parts.mse.unwrap_or(0.0),
            ModelKind::SupConvAe => {
                weights.classification * parts.bce.unwrap_or(0.0) + weights.reconstruction * parts.mse.unwrap_or(0.0)
            }
        };
        Ok((parts, grads))
    }

    /// Trainable tensors in a fixed order.
    pub fn params_mut(&mut self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        fn dense<'a, T: Scalar>(d: &'a mut Dense<T>, out: &mut Vec<ParamRef<'a, T>>) {
            let Dense { weight, bias, grad_weight, grad_bias, .. } = d;
            out.push(ParamRef { group: ParamGroup::Dense, value: weight, grad: grad_weight });
            out.push(ParamRef { group: ParamGroup::Dense, value: bias, grad: grad_bias });
        }
        for block in &mut self.blocks {
            push_conv(&mut block.conv, &mut out);
            let BatchNorm1d { gamma, beta, grad_gamma, grad_beta, .. } = &mut block.bn;
            out.push(ParamRef { group: ParamGroup::Conv, value: gamma, grad: grad_gamma });
            out.push(ParamRef { group: ParamGroup::Conv, value: beta, grad: grad_beta });
        }
        if let Some(head) = &mut self.head {
            for layer in &mut head.layers {
                dense(layer, &mut out);
            }
        }
        if let Some(dec) = &mut self.decoder {
            dense(&mut dec.dense, &mut out);
            for block in &mut dec.blocks {
                push_conv(&mut block.conv, &mut out);
            }
        }
        out
    }

    /// Running batch-norm statistics, in a fixed order.
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.bn.running_mean);
            out.push(&mut block.bn.running_var);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.params_mut().iter().map(|p| p.value.len()).sum()
    }

    pub fn adam_step(&mut self, adam: &mut Adam<T>, lr_conv: f64, lr_dense: f64) -> Result<(), NetError> {
        let refs = self.params_mut();
        let mut lrs = Vec::with_capacity(refs.len());
        let mut values = Vec::with_capacity(refs.len());
        let mut grads = Vec::with_capacity(refs.len());
        for r in refs {
            lrs.push(match r.group {
                ParamGroup::Conv => lr_conv,
                ParamGroup::Dense => lr_dense,
            });
            values.push(r.value.as_mut_slice());
            grads.push(r.grad.as_slice());
        }
        adam.step(&mut values, &grads, &lrs)
    }

    /// All trainable values followed by the running statistics.
    pub fn export_params(&mut self) -> Vec<T> {
        let mut flat = Vec::new();
        for p in self.params_mut() {
            flat.extend_from_slice(p.value);
        }
        for b in self.buffers_mut() {
            flat.extend_from_slice(b);
        }
        flat
    }

    pub fn import_params(&mut self, flat: &[T]) -> Result<(), NetError> {
        let expected = self.export_params().len();
        if flat.len() != expected {
            return shape_err(format!("{} values for a network with {expected}", flat.len()));
        }
        let mut at = 0;
        for p in self.params_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        for b in self.buffers_mut() {
            let n = b.len();
            b.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Same topology and values in another precision.
    pub fn cast<U: Scalar>(&mut self) -> Network<U> {
        let flat: Vec<U> = self.export_params().iter().map(|v| U::of(v.as_f64())).collect();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let mut other = Network::<U>::new(self.arch.clone(), &mut rng).expect("validated architecture");
        other.import_params(&flat).expect("same topology");
        other
    }

    /// ReLU masks and pooling argmaxes of the last training forward pass.
    /// Two passes with different patterns straddle a kink of the loss, so
    /// finite differences across them are meaningless.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend(b.relu.pattern());
            out.extend(b.pool.pattern());
        }
        if let Some(head) = &self.head {
            for r in &head.relus {
                out.extend(r.pattern());
            }
        }
        if let Some(dec) = &self.decoder {
            out.extend(dec.relu.pattern());
            for b in &dec.blocks {
                if let Some(r) = &b.relu {
                    out.extend(r.pattern());
                }
            }
        }
        out
    }
}

fn push_conv<'a, T: Scalar>(c: &'a mut Conv1d<T>, out: &mut Vec<ParamRef<'a, T>>) {
    let Conv1d { weight, bias, grad_weight, grad_bias, .. } = c;
    out.push(ParamRef { group: ParamGroup::Conv, value: weight, grad: grad_weight });
    out.push(ParamRef { group: ParamGroup::Conv, value: bias, grad: grad_bias });
}
