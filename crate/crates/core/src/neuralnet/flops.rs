//! Operation counts with a fixed convention: a multiply-add is two
//! operations; convolution adds one per output element for the bias; dense
//! layers count `2 * n_in * n_out`; ReLU, pooling and upsampling count one
//! per output element; batch normalization counts four per element.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, padding: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize },
    BatchNorm,
    GlobalAvgPool,
    Dense { inputs: usize, outputs: usize },
    /// Reinterpret a flat `(features, 1)` vector as `(channels, len)`.
    Reshape { channels: usize, len: usize },
    Upsample { target: usize },
}

/// Total operations for one sample of shape `(channels, len)`.
pub fn count_flops(layers: &[LayerDesc], input: (usize, usize)) -> u64 {
    let (mut c, mut l) = (input.0 as u64, input.1 as u64);
    let mut total = 0u64;
    for layer in layers {
        match *layer {
            LayerDesc::Conv { in_channels, out_channels, kernel, padding } => {
                let lo = (l + 2 * padding as u64).saturating_sub(kernel as u64) + 1;
                let (ci, co, k) = (in_channels as u64, out_channels as u64, kernel as u64);
                total += 2 * k * ci * co * lo + co * lo;
                c = co;
                l = lo;
            }
            LayerDesc::Relu => total += c * l,
            LayerDesc::MaxPool { kernel, stride } => {
                l = l.saturating_sub(kernel as u64) / stride as u64 + 1;
                total += c * l;
            }
            LayerDesc::BatchNorm => total += 4 * c * l,
            LayerDesc::GlobalAvgPool => {
                l = 1;
                total += c;
            }
            LayerDesc::Dense { inputs, outputs } => {
                total += 2 * inputs as u64 * outputs as u64;
                c = outputs as u64;
                l = 1;
            }
            LayerDesc::Reshape { channels, len } => {
                c = channels as u64;
                l = len as u64;
            }
            LayerDesc::Upsample { target } => {
                l = target as u64;
                total += c * l;
            }
        }
    }
    total
}
