use rand::Rng;
use rayon::prelude::*;

use super::ctc::ctc_loss;
use super::params::{Layout, ModelSpec, ParamVector};
use crate::error::{Error, Result};
use crate::glyphgen::{GrayImage, Sample, HEIGHT};
use crate::rng;
use crate::scalar::Real;

/// Per-frame class scores, `frames × classes`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<S> {
    pub frames: usize,
    pub classes: usize,
    pub data: Vec<S>,
}

impl<S: Real> Logits<S> {
    pub fn new(frames: usize, classes: usize, data: Vec<S>) -> Result<Self> {
        if frames == 0 || data.len() != frames * classes {
            return Err(Error::Shape(format!(
                "{} logits for {frames} frames × {classes} classes",
                data.len()
            )));
        }
        Ok(Logits { frames, classes, data })
    }

    pub fn frame(&self, t: usize) -> &[S] {
        &self.data[t * self.classes..(t + 1) * self.classes]
    }
}

/// Fresh parameters: fan-in scaled uniform weights, zero biases.
pub fn init_model<S: Real>(spec: &ModelSpec, seed: u64) -> Result<ParamVector<S>> {
    let layout = spec.layout()?;
    let mut values = vec![S::zero(); layout.len()];
    for (i, block) in layout.blocks().iter().enumerate() {
        if block.is_bias() {
            continue;
        }
        let fan_in: usize = block.shape[1..].iter().product();
        // He-uniform for layers followed by ReLU, LeCun-uniform for the classifier
        let gain = if block.name == "output.weight" { 3.0 } else { 6.0 };
        let bound = (gain / fan_in as f64).sqrt();
        let mut r = rng::stream(seed, &[rng::tag("init"), i as u64]);
        for v in &mut values[block.range()] {
            *v = S::of(r.random_range(-bound..bound));
        }
    }
    ParamVector::new(layout, values)
}

struct ConvLayer<'a, S> {
    weight: &'a [S],
    bias: &'a [S],
    cin: usize,
    cout: usize,
}

struct Net<'a, S> {
    convs: Vec<ConvLayer<'a, S>>,
    hidden_w: &'a [S],
    hidden_b: &'a [S],
    out_w: &'a [S],
    out_b: &'a [S],
    hidden: usize,
    features: usize,
    classes: usize,
    feature_height: usize,
}

impl<'a, S: Real> Net<'a, S> {
    fn view(params: &'a ParamVector<S>) -> Self {
        let layout: &Layout = params.layout();
        let spec = layout.spec();
        let v = params.values();
        let slice = |name: &str| &v[layout.block(name).expect("block present by construction").range()];
        let mut cin = 1;
        let convs = spec
            .conv_channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let l = ConvLayer {
                    weight: slice(&format!("conv{i}.weight")),
                    bias: slice(&format!("conv{i}.bias")),
                    cin,
                    cout,
                };
                cin = cout;
                l
            })
            .collect();
        Net {
            convs,
            hidden_w: slice("hidden.weight"),
            hidden_b: slice("hidden.bias"),
            out_w: slice("output.weight"),
            out_b: slice("output.bias"),
            hidden: spec.hidden_dim,
            features: spec.frame_features(),
            classes: spec.num_classes,
            feature_height: spec.feature_height(),
        }
    }
}

/// Activations kept for the backward pass.
struct Trace<S> {
    /// Per conv layer: input map, its (height, width), rectified conv output
    /// and the flat input index selected by each pooled cell.
    convs: Vec<ConvTrace<S>>,
    frames: usize,
    /// `frames × features` column features.
    x: Vec<S>,
    /// `frames × hidden` rectified hidden activations.
    h: Vec<S>,
}

struct ConvTrace<S> {
    input: Vec<S>,
    height: usize,
    width: usize,
    act: Vec<S>,
    argmax: Vec<u32>,
}

fn conv3x3<S: Real>(input: &[S], layer: &ConvLayer<S>, h: usize, w: usize) -> Vec<S> {
    let plane = h * w;
    let mut out = vec![S::zero(); layer.cout * plane];
    for co in 0..layer.cout {
        let o = &mut out[co * plane..(co + 1) * plane];
        o.fill(layer.bias[co]);
        for ci in 0..layer.cin {
            let inp = &input[ci * plane..(ci + 1) * plane];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = layer.weight[((co * layer.cin + ci) * 3 + ky) * 3 + kx];
                    let (y0, y1) = window(ky, h);
                    let (x0, x1) = window(kx, w);
                    for y in y0..y1 {
                        let iy = y + ky - 1;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                        for (a, &b) in orow.iter_mut().zip(irow) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows/cols `[lo, hi)` for which tap `k` of a padded 3-tap kernel
/// stays inside an axis of length `n`.
#[inline]
fn window(k: usize, n: usize) -> (usize, usize) {
    match k {
        0 => (1, n),
        1 => (0, n),
        _ => (0, n.saturating_sub(1)),
    }
}

fn max_pool<S: Real>(input: &[S], channels: usize, h: usize, w: usize) -> (Vec<S>, Vec<u32>) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(channels * h2 * w2);
    let mut arg = Vec::with_capacity(channels * h2 * w2);
    for c in 0..channels {
        let base = c * h * w;
        for y in 0..h2 {
            for x in 0..w2 {
                let mut best = base + 2 * y * w + 2 * x;
                for idx in [best + 1, best + w, best + w + 1] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

fn run<S: Real>(net: &Net<S>, image: &GrayImage) -> Result<(Logits<S>, Trace<S>)> {
    if image.height != HEIGHT {
        return Err(Error::Shape(format!("image height {} != {HEIGHT}", image.height)));
    }
    let frames = image.width >> net.convs.len();
    if frames == 0 {
        return Err(Error::Shape(format!(
            "image width {} yields no frames after {}x downsampling",
            image.width,
            1 << net.convs.len()
        )));
    }
    let mut map: Vec<S> = image.pixels.iter().map(|&p| S::of(p as f64)).collect();
    let (mut h, mut w) = (image.height, image.width);
    let mut convs = Vec::with_capacity(net.convs.len());
    for layer in &net.convs {
        let mut act = conv3x3(&map, layer, h, w);
        for a in act.iter_mut() {
            if *a < S::zero() {
                *a = S::zero();
            }
        }
        let (pooled, argmax) = max_pool(&act, layer.cout, h, w);
        convs.push(ConvTrace {
            input: std::mem::replace(&mut map, pooled),
            height: h,
            width: w,
            act,
            argmax,
        });
        h /= 2;
        w /= 2;
    }
    debug_assert_eq!(w, frames);
    debug_assert_eq!(h, net.feature_height);

    let (nf, nh, nc) = (net.features, net.hidden, net.classes);
    let mut x = vec![S::zero(); frames * nf];
    for (c, chan) in map.chunks(h * w).enumerate() {
        for y in 0..h {
            for f in 0..frames {
                x[f * nf + c * h + y] = chan[y * w + f];
            }
        }
    }
    let mut hid = vec![S::zero(); frames * nh];
    let mut logits = vec![S::zero(); frames * nc];
    for f in 0..frames {
        let xf = &x[f * nf..(f + 1) * nf];
        let hf = &mut hid[f * nh..(f + 1) * nh];
        for j in 0..nh {
            let row = &net.hidden_w[j * nf..(j + 1) * nf];
            let z = row.iter().zip(xf).fold(net.hidden_b[j], |acc, (&a, &b)| acc + a * b);
            hf[j] = if z > S::zero() { z } else { S::zero() };
        }
        let lf = &mut logits[f * nc..(f + 1) * nc];
        for k in 0..nc {
            let row = &net.out_w[k * nh..(k + 1) * nh];
            lf[k] = row.iter().zip(hf.iter()).fold(net.out_b[k], |acc, (&a, &b)| acc + a * b);
        }
    }
    Ok((
        Logits::new(frames, nc, logits)?,
        Trace {
            convs,
            frames,
            x,
            h: hid,
        },
    ))
}

/// Per-frame logits for one image.
pub fn forward<S: Real>(params: &ParamVector<S>, image: &GrayImage) -> Result<Logits<S>> {
    run(&Net::view(params), image).map(|(l, _)| l)
}

/// Accumulate d(loss)/d(params) into `grad` given d(loss)/d(logits).
fn backprop<S: Real>(params: &ParamVector<S>, net: &Net<S>, trace: &Trace<S>, dlogits: &[S], grad: &mut [S]) {
    let layout = params.layout();
    let range = |name: &str| layout.block(name).expect("block present by construction").range();
    let (nf, nh, nc) = (net.features, net.hidden, net.classes);
    let frames = trace.frames;

    let mut dx = vec![S::zero(); frames * nf];
    {
        let ow = range("output.weight");
        let ob = range("output.bias");
        let hw = range("hidden.weight");
        let hb = range("hidden.bias");
        let mut dh = vec![S::zero(); nh];
        for f in 0..frames {
            let hf = &trace.h[f * nh..(f + 1) * nh];
            let gl = &dlogits[f * nc..(f + 1) * nc];
            dh.fill(S::zero());
            for k in 0..nc {
                let g = gl[k];
                grad[ob.start + k] += g;
                let gw = &mut grad[ow.start + k * nh..ow.start + (k + 1) * nh];
                let wrow = &net.out_w[k * nh..(k + 1) * nh];
                for j in 0..nh {
                    gw[j] += g * hf[j];
                    dh[j] += g * wrow[j];
                }
            }
            let xf = &trace.x[f * nf..(f + 1) * nf];
            let dxf = &mut dx[f * nf..(f + 1) * nf];
            for j in 0..nh {
                if hf[j] <= S::zero() {
                    continue;
                }
                let g = dh[j];
                grad[hb.start + j] += g;
                let gw = &mut grad[hw.start + j * nf..hw.start + (j + 1) * nf];
                let wrow = &net.hidden_w[j * nf..(j + 1) * nf];
                for i in 0..nf {
                    gw[i] += g * xf[i];
                    dxf[i] += g * wrow[i];
                }
            }
        }
    }

    // back to the pooled map of the last conv layer, [c][y][f]
    let fh = net.feature_height;
    let channels = net.convs.last().map(|l| l.cout).unwrap_or(0);
    let mut dmap = vec![S::zero(); channels * fh * frames];
    for f in 0..frames {
        for c in 0..channels {
            for y in 0..fh {
                dmap[(c * fh + y) * frames + f] = dx[f * nf + c * fh + y];
            }
        }
    }

    for (li, (layer, t)) in net.convs.iter().zip(&trace.convs).enumerate().rev() {
        let (h, w) = (t.height, t.width);
        let plane = h * w;
        // unpool and rectify
        let mut dact = vec![S::zero(); layer.cout * plane];
        for (&idx, &g) in t.argmax.iter().zip(&dmap) {
            if t.act[idx as usize] > S::zero() {
                dact[idx as usize] += g;
            }
        }
        let wr = range(&format!("conv{li}.weight"));
        let br = range(&format!("conv{li}.bias"));
        let need_input = li > 0;
        let mut din = if need_input {
            vec![S::zero(); layer.cin * plane]
        } else {
            Vec::new()
        };
        for co in 0..layer.cout {
            let d = &dact[co * plane..(co + 1) * plane];
            grad[br.start + co] += d.iter().copied().sum::<S>();
            for ci in 0..layer.cin {
                let inp = &t.input[ci * plane..(ci + 1) * plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((co * layer.cin + ci) * 3 + ky) * 3 + kx;
                        let wv = layer.weight[widx];
                        let (y0, y1) = window(ky, h);
                        let (x0, x1) = window(kx, w);
                        let mut acc = S::zero();
                        for y in y0..y1 {
                            let iy = y + ky - 1;
                            let drow = &d[y * w + x0..y * w + x1];
                            let irow = &inp[iy * w + x0 + kx - 1..iy * w + x1 + kx - 1];
                            acc += drow.iter().zip(irow).fold(S::zero(), |s, (&a, &b)| s + a * b);
                            if need_input {
                                let dirow = &mut din[ci * plane + iy * w + x0 + kx - 1..ci * plane + iy * w + x1 + kx - 1];
                                for (di, &g) in dirow.iter_mut().zip(drow) {
                                    *di += wv * g;
                                }
                            }
                        }
                        grad[wr.start + widx] += acc;
                    }
                }
            }
        }
        dmap = din;
    }
}

/// CTC loss and parameter gradient for a single sample.
pub fn sample_loss_grad<S: Real>(params: &ParamVector<S>, sample: &Sample) -> Result<(S, Vec<S>)> {
    let net = Net::view(params);
    let (logits, trace) = run(&net, &sample.image)?;
    let (loss, dlogits) = ctc_loss(&logits, &sample.label)?;
    let mut grad = vec![S::zero(); params.len()];
    backprop(params, &net, &trace, &dlogits, &mut grad);
    Ok((loss, grad))
}

/// Mean CTC loss and mean gradient over `batch`.
///
/// Per-sample work may run in parallel; the reduction is a sequential sum in
/// batch order, so the result does not depend on the thread count.
pub fn backward<S: Real>(params: &ParamVector<S>, batch: &[Sample]) -> Result<(S, Vec<S>)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    backward_refs(params, &refs)
}

/// [`backward`] over borrowed samples.
pub fn backward_refs<S: Real>(params: &ParamVector<S>, batch: &[&Sample]) -> Result<(S, Vec<S>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample: Vec<(S, Vec<S>)> = batch
        .par_iter()
        .enumerate()
        .map(|(i, s)| sample_loss_grad(params, s).map_err(|e| e.at_sample(i)))
        .collect::<Result<_>>()?;
    let n = S::of(batch.len() as f64);
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); params.len()];
    for (l, g) in &per_sample {
        loss += *l;
        for (a, &b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((loss / n, grad))
}
