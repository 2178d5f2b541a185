use super::config::{LayerGeometry, NetworkConfig};
use super::params::{ChannelMask, ParamStore, TaskHead};
use super::NnError;

/// Intermediates recorded by one forward pass, enough to run the backward pass
/// and to read per-unit activations.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub(crate) batch: usize,
    pub(crate) geometry: Vec<LayerGeometry>,
    pub(crate) mask: ChannelMask,
    pub(crate) input: Vec<f64>,
    /// Post-ReLU output of every conv layer, `[batch][channel][h][w]`.
    pub(crate) outputs: Vec<Vec<f64>>,
    pub(crate) pooled: Vec<f64>,
    pub(crate) hidden: Option<Vec<f64>>,
    pub logits: Vec<Vec<f64>>,
}

impl ForwardPass {
    pub fn batch_len(&self) -> usize {
        self.batch
    }

    pub fn mask(&self) -> &ChannelMask {
        &self.mask
    }

    /// Post-ReLU map of unit (`layer`, `channel`) for one sample, row-major `(h, w)`.
    /// Masked-out units yield an all-zero map.
    pub fn activation(&self, layer: usize, channel: usize, sample: usize) -> &[f64] {
        let g = &self.geometry[layer];
        let start = sample * g.out_len() + channel * g.plane();
        &self.outputs[layer][start..start + g.plane()]
    }

    /// Globally pooled features of one sample.
    pub fn features(&self, sample: usize) -> &[f64] {
        let f = self.pooled.len() / self.batch.max(1);
        &self.pooled[sample * f..(sample + 1) * f]
    }

    pub fn geometry(&self) -> &[LayerGeometry] {
        &self.geometry
    }
}

/// Gradients for every trainable tensor touched by a forward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv_weight: Vec<Vec<f64>>,
    pub conv_bias: Vec<Vec<f64>>,
    pub head_hidden: Option<(Vec<f64>, Vec<f64>)>,
    pub head_out: (Vec<f64>, Vec<f64>),
}

fn conv_forward(g: &LayerGeometry, weight: &[f64], bias: &[f64], keep: &[bool], input: &[f64], out: &mut [f64]) {
    let (k, iw, ow, oh) = (g.kernel, g.in_w, g.out_w, g.out_h);
    let in_plane = g.in_h * g.in_w;
    for o in 0..g.out_channels {
        let plane = &mut out[o * g.plane()..(o + 1) * g.plane()];
        if !keep[o] {
            plane.fill(0.0);
            continue;
        }
        plane.fill(bias[o]);
        for i in 0..g.in_channels {
            let src = &input[i * in_plane..(i + 1) * in_plane];
            for ky in 0..k {
                for kx in 0..k {
                    let w = weight[((o * g.in_channels + i) * k + ky) * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let row_in = &src[(y + ky) * iw + kx..(y + ky) * iw + kx + ow];
                        let row_out = &mut plane[y * ow..(y + 1) * ow];
                        for (d, s) in row_out.iter_mut().zip(row_in) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
        for v in plane.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Runs the conv trunk and `head` on a batch of images laid out `[c][h][w]`.
///
/// Channels switched off in `mask` produce identically zero maps. With no mask every
/// channel is active.
pub fn forward(
    store: &ParamStore,
    config: &NetworkConfig,
    mask: Option<&ChannelMask>,
    head: &TaskHead,
    batch: &[&[f32]],
) -> Result<ForwardPass, NnError> {
    store.check(config)?;
    let mask = match mask {
        Some(m) => {
            m.check(config)?;
            m.clone()
        }
        None => ChannelMask::full(config),
    };
    if head.out.in_dim != head.hidden.as_ref().map_or(config.feature_len(), |h| h.out_dim)
        || head.hidden.as_ref().is_some_and(|h| h.in_dim != config.feature_len())
    {
        return Err(NnError::Config(format!("head of task {} does not match the trunk", head.task_id)));
    }
    let in_len = config.input_len();
    for (i, img) in batch.iter().enumerate() {
        if img.len() != in_len {
            return Err(NnError::Input(format!("sample {i} has {} values, expected {in_len}", img.len())));
        }
    }
    let n = batch.len();
    let geometry = config.geometry();
    let center = config.input_center;
    let input: Vec<f64> = batch.iter().flat_map(|img| img.iter().map(move |v| *v as f64 - center)).collect();

    let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(geometry.len());
    for (l, g) in geometry.iter().enumerate() {
        let mut out = vec![0.0; n * g.out_len()];
        let layer = &store.layers[l];
        for s in 0..n {
            let src = if l == 0 {
                &input[s * g.in_len()..(s + 1) * g.in_len()]
            } else {
                &outputs[l - 1][s * g.in_len()..(s + 1) * g.in_len()]
            };
            conv_forward(g, &layer.weight, &layer.bias, &mask.kept[l], src, &mut out[s * g.out_len()..(s + 1) * g.out_len()]);
        }
        outputs.push(out);
    }

    let last = geometry.last().expect("validated config has a conv layer");
    let f = last.out_channels;
    let area = last.plane() as f64;
    let top = outputs.last().expect("at least one layer");
    let mut pooled = vec![0.0; n * f];
    for s in 0..n {
        for c in 0..f {
            let start = s * last.out_len() + c * last.plane();
            pooled[s * f + c] = top[start..start + last.plane()].iter().sum::<f64>() / area;
        }
    }

    let mut hidden = head.hidden.as_ref().map(|h| vec![0.0; n * h.out_dim]);
    let mut logits = Vec::with_capacity(n);
    for s in 0..n {
        let feats = &pooled[s * f..(s + 1) * f];
        let mut out = vec![0.0; head.out.out_dim];
        match (&head.hidden, hidden.as_mut()) {
            (Some(h), Some(buf)) => {
                let slot = &mut buf[s * h.out_dim..(s + 1) * h.out_dim];
                h.apply(feats, slot);
                for v in slot.iter_mut() {
                    *v = v.max(0.0);
                }
                head.out.apply(slot, &mut out);
            }
            _ => head.out.apply(feats, &mut out),
        }
        logits.push(out);
    }

    Ok(ForwardPass { batch: n, geometry, mask, input, outputs, pooled, hidden, logits })
}

/// Backpropagates `dlogits` (one row per sample) through a recorded pass.
///
/// Gradients pass through frozen weights to earlier layers; which tensors are then
/// actually updated is the optimizer's concern. Filters whose every parameter is frozen
/// skip the weight-gradient accumulation (their entries stay zero).
pub fn backward(store: &ParamStore, head: &TaskHead, pass: &ForwardPass, dlogits: &[Vec<f64>]) -> Result<Gradients, NnError> {
    if dlogits.len() != pass.batch {
        return Err(NnError::Input(format!("{} gradient rows for a batch of {}", dlogits.len(), pass.batch)));
    }
    let n = pass.batch;
    let geometry = &pass.geometry;
    let last = geometry.last().expect("at least one layer");
    let f = last.out_channels;

    // Head.
    let mut d_out_w = vec![0.0; head.out.weight.len()];
    let mut d_out_b = vec![0.0; head.out.bias.len()];
    let mut d_pooled = vec![0.0; n * f];
    let mut head_hidden = head.hidden.as_ref().map(|h| (vec![0.0; h.weight.len()], vec![0.0; h.bias.len()]));
    for (s, dl) in dlogits.iter().enumerate() {
        if dl.len() != head.out.out_dim {
            return Err(NnError::Input(format!("gradient row {s} has length {}, head has {}", dl.len(), head.out.out_dim)));
        }
        let feats = &pass.pooled[s * f..(s + 1) * f];
        let head_in: &[f64] = match (&head.hidden, &pass.hidden) {
            (Some(h), Some(buf)) => &buf[s * h.out_dim..(s + 1) * h.out_dim],
            _ => feats,
        };
        let in_dim = head.out.in_dim;
        let mut d_head_in = vec![0.0; in_dim];
        for (o, g) in dl.iter().enumerate() {
            d_out_b[o] += g;
            let row = &mut d_out_w[o * in_dim..(o + 1) * in_dim];
            for (dw, x) in row.iter_mut().zip(head_in) {
                *dw += g * x;
            }
            let wrow = &head.out.weight[o * in_dim..(o + 1) * in_dim];
            for (di, w) in d_head_in.iter_mut().zip(wrow) {
                *di += g * w;
            }
        }
        let dfeat = &mut d_pooled[s * f..(s + 1) * f];
        match (&head.hidden, head_hidden.as_mut()) {
            (Some(h), Some((dw, db))) => {
                for j in 0..h.out_dim {
                    if head_in[j] <= 0.0 {
                        continue;
                    }
                    let g = d_head_in[j];
                    db[j] += g;
                    for c in 0..f {
                        dw[j * f + c] += g * feats[c];
                        dfeat[c] += g * h.weight[j * f + c];
                    }
                }
            }
            _ => dfeat.copy_from_slice(&d_head_in),
        }
    }

    // Conv trunk, last layer first.
    let nl = geometry.len();
    let mut conv_weight: Vec<Vec<f64>> = geometry.iter().map(|g| vec![0.0; g.weight_len()]).collect();
    let mut conv_bias: Vec<Vec<f64>> = geometry.iter().map(|g| vec![0.0; g.out_channels]).collect();
    let area = last.plane() as f64;
    let mut d_post = vec![0.0; n * last.out_len()];
    for s in 0..n {
        for c in 0..f {
            let g = d_pooled[s * f + c] / area;
            let start = s * last.out_len() + c * last.plane();
            d_post[start..start + last.plane()].fill(g);
        }
    }

    for l in (0..nl).rev() {
        let g = &geometry[l];
        let layer = &store.layers[l];
        let keep = &pass.mask.kept[l];
        let post = &pass.outputs[l];
        let need_input_grad = l > 0;
        let mut d_in = if need_input_grad { vec![0.0; n * g.in_len()] } else { Vec::new() };
        let learn: Vec<bool> = (0..g.out_channels).map(|o| keep[o] && !layer.channel_fully_frozen(o)).collect();
        let (k, iw, ow, oh) = (g.kernel, g.in_w, g.out_w, g.out_h);
        let in_plane = g.in_h * g.in_w;
        let mut d_pre = vec![0.0; g.plane()];
        for s in 0..n {
            let src: &[f64] = if l == 0 {
                &pass.input[s * g.in_len()..(s + 1) * g.in_len()]
            } else {
                &pass.outputs[l - 1][s * g.in_len()..(s + 1) * g.in_len()]
            };
            for o in 0..g.out_channels {
                if !keep[o] {
                    continue;
                }
                let start = s * g.out_len() + o * g.plane();
                let mut any = false;
                for ((dp, dpost), p) in d_pre.iter_mut().zip(&d_post[start..start + g.plane()]).zip(&post[start..start + g.plane()]) {
                    *dp = if *p > 0.0 { *dpost } else { 0.0 };
                    any |= *dp != 0.0;
                }
                if !any {
                    continue;
                }
                if learn[o] {
                    conv_bias[l][o] += d_pre.iter().sum::<f64>();
                }
                for i in 0..g.in_channels {
                    let x = &src[i * in_plane..(i + 1) * in_plane];
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((o * g.in_channels + i) * k + ky) * k + kx;
                            if learn[o] {
                                let mut acc = 0.0;
                                for y in 0..oh {
                                    let row_in = &x[(y + ky) * iw + kx..(y + ky) * iw + kx + ow];
                                    let row_d = &d_pre[y * ow..(y + 1) * ow];
                                    acc += row_in.iter().zip(row_d).map(|(a, b)| a * b).sum::<f64>();
                                }
                                conv_weight[l][widx] += acc;
                            }
                            if need_input_grad {
                                let w = layer.weight[widx];
                                if w == 0.0 {
                                    continue;
                                }
                                let dx = &mut d_in[s * g.in_len() + i * in_plane..s * g.in_len() + (i + 1) * in_plane];
                                for y in 0..oh {
                                    let row_dx = &mut dx[(y + ky) * iw + kx..(y + ky) * iw + kx + ow];
                                    let row_d = &d_pre[y * ow..(y + 1) * ow];
                                    for (a, b) in row_dx.iter_mut().zip(row_d) {
                                        *a += w * b;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_input_grad {
            d_post = d_in;
        }
    }

    Ok(Gradients { conv_weight, conv_bias, head_hidden, head_out: (d_out_w, d_out_b) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::ConvSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            input_shape: (2, 6, 6),
            conv_layers: vec![ConvSpec { out_channels: 3, kernel_size: 3 }, ConvSpec { out_channels: 2, kernel_size: 3 }],
            head_width: 0,
            input_center: 0.5,
            seed: 5,
        }
    }

    fn images(n: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn masked_channels_are_zero() {
        let cfg = small_config();
        let store = ParamStore::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = TaskHead::new(&cfg, 1, vec![0, 1], &mut rng);
        let imgs = images(3, cfg.input_len(), 2);
        let batch: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let mut mask = ChannelMask::full(&cfg);
        mask.kept[0][1] = false;
        mask.kept[1][0] = false;
        let pass = forward(&store, &cfg, Some(&mask), &head, &batch).unwrap();
        for s in 0..3 {
            assert!(pass.activation(0, 1, s).iter().all(|v| *v == 0.0));
            assert!(pass.activation(1, 0, s).iter().all(|v| *v == 0.0));
            assert_eq!(pass.features(s)[0], 0.0);
        }
    }

    #[test]
    fn rejects_wrong_image_size_and_mask_layers() {
        let cfg = small_config();
        let store = ParamStore::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = TaskHead::new(&cfg, 1, vec![0, 1], &mut rng);
        let bad = vec![0.0f32; 5];
        assert!(matches!(forward(&store, &cfg, None, &head, &[&bad]), Err(NnError::Input(_))));
        let mask = ChannelMask { kept: vec![vec![true; 3]] };
        let ok = vec![0.0f32; cfg.input_len()];
        assert!(matches!(forward(&store, &cfg, Some(&mask), &head, &[&ok]), Err(NnError::Config(_))));
    }

    #[test]
    fn activations_are_non_negative() {
        let cfg = small_config();
        let store = ParamStore::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = TaskHead::new(&cfg, 1, vec![0, 1], &mut rng);
        let imgs = images(4, cfg.input_len(), 9);
        let batch: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let pass = forward(&store, &cfg, None, &head, &batch).unwrap();
        assert!(pass.outputs.iter().flatten().all(|v| *v >= 0.0));
    }
}
