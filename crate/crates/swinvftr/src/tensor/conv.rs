//! Direct 3D convolution kernels (forward, input-gradient, weight-gradient)
//! and the stride-2/kernel-2 transposed convolution used for upsampling.
//!
//! One op covers vanilla, depth-wise (`groups == Cin`) and dilated
//! convolution. Loops keep the fastest-varying axis (W) contiguous so the
//! stride-1 paths vectorize; parallel tasks own disjoint output planes.

use super::{fmt_shape, Result, TensorError};
use rayon::prelude::*;

/// Stride / padding / dilation / groups for one conv3d application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub dilation: [usize; 3],
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
            dilation: [1, 1, 1],
            groups: 1,
        }
    }
}

impl ConvSpec {
    pub fn padded(padding: [usize; 3]) -> Self {
        ConvSpec {
            padding,
            ..Default::default()
        }
    }

    pub fn grouped(groups: usize) -> Self {
        ConvSpec {
            groups,
            ..Default::default()
        }
    }
}

/// Validates shapes and returns the output spatial dims `[od, oh, ow]`.
pub fn conv3d_output_dims(
    in_shape: &[usize],
    w_shape: &[usize],
    spec: &ConvSpec,
) -> Result<[usize; 3]> {
    if in_shape.len() != 5 || w_shape.len() != 5 {
        return Err(TensorError::Shape(format!(
            "conv3d expects 5-d input and weight, got {} and {}",
            fmt_shape(in_shape),
            fmt_shape(w_shape)
        )));
    }
    let cin = in_shape[1];
    if spec.groups == 0 || cin % spec.groups != 0 || w_shape[0] % spec.groups != 0 {
        return Err(TensorError::Shape(format!(
            "conv3d groups={} must divide input channels {} and output channels {}",
            spec.groups, cin, w_shape[0]
        )));
    }
    if w_shape[1] != cin / spec.groups {
        return Err(TensorError::Shape(format!(
            "conv3d weight {} incompatible with input {} under groups={}",
            fmt_shape(w_shape),
            fmt_shape(in_shape),
            spec.groups
        )));
    }
    let mut out = [0usize; 3];
    for ax in 0..3 {
        let i = in_shape[2 + ax];
        let k = w_shape[2 + ax];
        let span = spec.dilation[ax] * (k - 1) + 1;
        let padded = i + 2 * spec.padding[ax];
        if padded < span || spec.stride[ax] == 0 || spec.dilation[ax] == 0 || k == 0 {
            return Err(TensorError::Shape(format!(
                "conv3d kernel span {} exceeds padded extent {} on axis {} (input {}, weight {})",
                span,
                padded,
                ax,
                fmt_shape(in_shape),
                fmt_shape(w_shape)
            )));
        }
        out[ax] = (padded - span) / spec.stride[ax] + 1;
    }
    Ok(out)
}

/// Valid output range `[lo, hi)` along one axis for a fixed kernel offset,
/// assuming stride 1: positions where `o + off` lands inside `0..extent`.
#[inline]
fn unit_stride_range(off: isize, out_len: usize, extent: usize) -> (usize, usize) {
    let lo = if off < 0 { (-off) as usize } else { 0 };
    let hi_signed = extent as isize - off;
    let hi = hi_signed.clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
pub fn conv3d_forward(
    input: &[f32],
    in_shape: &[usize],
    weight: &[f32],
    w_shape: &[usize],
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<(Vec<f32>, Vec<usize>)> {
    let [od, oh, ow] = conv3d_output_dims(in_shape, w_shape, spec)?;
    let (n, cin) = (in_shape[0], in_shape[1]);
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let cout = w_shape[0];
    let (kd, kh, kw) = (w_shape[2], w_shape[3], w_shape[4]);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let [dd, dh, dw] = spec.dilation;

    let mut out = vec![0.0f32; n * cout * od * oh * ow];
    let plane = od * oh * ow;
    let work = n * cout * plane * cin_g * kd * kh * kw;

    let task = |flat: usize, out_plane: &mut [f32]| {
        let ni = flat / cout;
        let co = flat % cout;
        let g = co / cout_g;
        if let Some(b) = bias {
            out_plane.fill(b[co]);
        }
        for cig in 0..cin_g {
            let ci = g * cin_g + cig;
            let in_base = (ni * cin + ci) * d * h * w;
            let w_base = ((co * cin_g + cig) * kd * kh * kw) as usize;
            for odi in 0..od {
                for ki in 0..kd {
                    let id = (odi * sd + ki * dd) as isize - pd as isize;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    for ohi in 0..oh {
                        for kj in 0..kh {
                            let ih = (ohi * sh + kj * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let out_row =
                                &mut out_plane[(odi * oh + ohi) * ow..(odi * oh + ohi + 1) * ow];
                            let in_row_base = in_base + (id as usize * h + ih as usize) * w;
                            for kk in 0..kw {
                                let wv = weight[w_base + (ki * kh + kj) * kw + kk];
                                if wv == 0.0 {
                                    continue;
                                }
                                let off = (kk * dw) as isize - pw as isize;
                                if sw == 1 {
                                    let (lo, hi) = unit_stride_range(off, ow, w);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let src = &input[(in_row_base as isize + lo as isize + off)
                                        as usize
                                        ..(in_row_base as isize + hi as isize + off) as usize];
                                    for (o, s) in out_row[lo..hi].iter_mut().zip(src) {
                                        *o += wv * s;
                                    }
                                } else {
                                    for (owi, o) in out_row.iter_mut().enumerate() {
                                        let iw = (owi * sw) as isize + off;
                                        if iw >= 0 && iw < w as isize {
                                            *o += wv * input[in_row_base + iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    if work < 32_768 || n * cout < 2 {
        for (flat, out_plane) in out.chunks_exact_mut(plane).enumerate() {
            task(flat, out_plane);
        }
    } else {
        out.par_chunks_exact_mut(plane)
            .enumerate()
            .for_each(|(flat, out_plane)| task(flat, out_plane));
    }
    Ok((out, vec![n, cout, od, oh, ow]))
}

/// Gradient w.r.t. the conv3d input.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_input(
    grad_out: &[f32],
    out_shape: &[usize],
    weight: &[f32],
    w_shape: &[usize],
    in_shape: &[usize],
    spec: &ConvSpec,
) -> Vec<f32> {
    let (n, cin) = (in_shape[0], in_shape[1]);
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let cout = w_shape[0];
    let (kd, kh, kw) = (w_shape[2], w_shape[3], w_shape[4]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let [dd, dh, dw] = spec.dilation;

    let mut din = vec![0.0f32; n * cin * d * h * w];
    let plane = d * h * w;

    let task = |flat: usize, din_plane: &mut [f32]| {
        let ni = flat / cin;
        let ci = flat % cin;
        let g = ci / cin_g;
        let cig = ci % cin_g;
        for coi in 0..cout_g {
            let co = g * cout_g + coi;
            let go_base = (ni * cout + co) * od * oh * ow;
            let w_base = (co * cin_g + cig) * kd * kh * kw;
            for odi in 0..od {
                for ki in 0..kd {
                    let id = (odi * sd + ki * dd) as isize - pd as isize;
                    if id < 0 || id >= d as isize {
                        continue;
                    }
                    for ohi in 0..oh {
                        for kj in 0..kh {
                            let ih = (ohi * sh + kj * dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let go_row = &grad_out
                                [go_base + (odi * oh + ohi) * ow..go_base + (odi * oh + ohi + 1) * ow];
                            let din_row_base = (id as usize * h + ih as usize) * w;
                            for kk in 0..kw {
                                let wv = weight[w_base + (ki * kh + kj) * kw + kk];
                                if wv == 0.0 {
                                    continue;
                                }
                                let off = (kk * dw) as isize - pw as isize;
                                if sw == 1 {
                                    let (lo, hi) = unit_stride_range(off, ow, w);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let dst = &mut din_plane[(din_row_base as isize
                                        + lo as isize
                                        + off)
                                        as usize
                                        ..(din_row_base as isize + hi as isize + off) as usize];
                                    for (t, g) in dst.iter_mut().zip(&go_row[lo..hi]) {
                                        *t += wv * g;
                                    }
                                } else {
                                    for (owi, g) in go_row.iter().enumerate() {
                                        let iw = (owi * sw) as isize + off;
                                        if iw >= 0 && iw < w as isize {
                                            din_plane[din_row_base + iw as usize] += wv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    let work = n * cin * plane * cout_g * kd * kh * kw;
    if work < 32_768 || n * cin < 2 {
        for (flat, din_plane) in din.chunks_exact_mut(plane).enumerate() {
            task(flat, din_plane);
        }
    } else {
        din.par_chunks_exact_mut(plane)
            .enumerate()
            .for_each(|(flat, din_plane)| task(flat, din_plane));
    }
    din
}

/// Gradients w.r.t. the conv3d weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv3d_backward_weight(
    input: &[f32],
    in_shape: &[usize],
    grad_out: &[f32],
    out_shape: &[usize],
    w_shape: &[usize],
    spec: &ConvSpec,
    want_bias: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let (n, cin) = (in_shape[0], in_shape[1]);
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let cout = w_shape[0];
    let (kd, kh, kw) = (w_shape[2], w_shape[3], w_shape[4]);
    let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
    let cin_g = cin / spec.groups;
    let cout_g = cout / spec.groups;
    let [sd, sh, sw] = spec.stride;
    let [pd, ph, pw] = spec.padding;
    let [dd, dh, dw] = spec.dilation;

    let mut dweight = vec![0.0f32; cout * cin_g * kd * kh * kw];
    let kvol = kd * kh * kw;

    let task = |widx: usize, dw_out: &mut f32| {
        let co = widx / (cin_g * kvol);
        let rem = widx % (cin_g * kvol);
        let cig = rem / kvol;
        let kflat = rem % kvol;
        let ki = kflat / (kh * kw);
        let kj = (kflat / kw) % kh;
        let kk = kflat % kw;
        let g = co / cout_g;
        let ci = g * cin_g + cig;
        let mut acc = 0.0f64;
        for ni in 0..n {
            let in_base = (ni * cin + ci) * d * h * w;
            let go_base = (ni * cout + co) * od * oh * ow;
            for odi in 0..od {
                let id = (odi * sd + ki * dd) as isize - pd as isize;
                if id < 0 || id >= d as isize {
                    continue;
                }
                for ohi in 0..oh {
                    let ih = (ohi * sh + kj * dh) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let go_row =
                        &grad_out[go_base + (odi * oh + ohi) * ow..go_base + (odi * oh + ohi + 1) * ow];
                    let in_row_base = in_base + (id as usize * h + ih as usize) * w;
                    let off = (kk * dw) as isize - pw as isize;
                    if sw == 1 {
                        let (lo, hi) = unit_stride_range(off, ow, w);
                        if lo >= hi {
                            continue;
                        }
                        let src = &input[(in_row_base as isize + lo as isize + off) as usize
                            ..(in_row_base as isize + hi as isize + off) as usize];
                        let mut row_acc = 0.0f32;
                        for (g, s) in go_row[lo..hi].iter().zip(src) {
                            row_acc += g * s;
                        }
                        acc += row_acc as f64;
                    } else {
                        let mut row_acc = 0.0f32;
                        for (owi, g) in go_row.iter().enumerate() {
                            let iw = (owi * sw) as isize + off;
                            if iw >= 0 && iw < w as isize {
                                row_acc += g * input[in_row_base + iw as usize];
                            }
                        }
                        acc += row_acc as f64;
                    }
                }
            }
        }
        *dw_out = acc as f32;
    };

    let work = dweight.len() * n * od * oh * ow;
    if work < 32_768 || dweight.len() < 2 {
        for (widx, dw_out) in dweight.iter_mut().enumerate() {
            task(widx, dw_out);
        }
    } else {
        dweight
            .par_iter_mut()
            .enumerate()
            .for_each(|(widx, dw_out)| task(widx, dw_out));
    }

    let dbias = want_bias.then(|| {
        let plane = od * oh * ow;
        (0..cout)
            .map(|co| {
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let base = (ni * cout + co) * plane;
                    for &g in &grad_out[base..base + plane] {
                        acc += g as f64;
                    }
                }
                acc as f32
            })
            .collect()
    });
    (dweight, dbias)
}

/// Shape check for the stride-2 / kernel-2 transposed convolution. Weight is
/// `[Cin, Cout, 2, 2, 2]`; every spatial dim exactly doubles.
pub fn conv_transpose2_output_dims(
    in_shape: &[usize],
    w_shape: &[usize],
    stride: usize,
    kernel: usize,
) -> Result<Vec<usize>> {
    if stride != 2 || kernel != 2 {
        return Err(TensorError::UnsupportedConfig(format!(
            "transposed conv supports stride=2 kernel=2 only, got stride={stride} kernel={kernel}"
        )));
    }
    if in_shape.len() != 5 || w_shape.len() != 5 || w_shape[2..] != [2, 2, 2] {
        return Err(TensorError::Shape(format!(
            "transposed conv expects input [N,Cin,D,H,W] and weight [Cin,Cout,2,2,2], got {} and {}",
            fmt_shape(in_shape),
            fmt_shape(w_shape)
        )));
    }
    if in_shape[1] != w_shape[0] {
        return Err(TensorError::Shape(format!(
            "transposed conv channel mismatch: input {} vs weight {}",
            fmt_shape(in_shape),
            fmt_shape(w_shape)
        )));
    }
    Ok(vec![
        in_shape[0],
        w_shape[1],
        in_shape[2] * 2,
        in_shape[3] * 2,
        in_shape[4] * 2,
    ])
}

pub fn conv_transpose2_forward(
    input: &[f32],
    in_shape: &[usize],
    weight: &[f32],
    bias: Option<&[f32]>,
) -> (Vec<f32>, Vec<usize>) {
    let (n, cin) = (in_shape[0], in_shape[1]);
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let cout = weight.len() / (cin * 8);
    let (odm, ohm, owm) = (2 * d, 2 * h, 2 * w);
    let mut out = vec![0.0f32; n * cout * odm * ohm * owm];
    let plane = odm * ohm * owm;

    let task = |flat: usize, out_plane: &mut [f32]| {
        let ni = flat / cout;
        let co = flat % cout;
        if let Some(b) = bias {
            out_plane.fill(b[co]);
        }
        for ci in 0..cin {
            let in_base = (ni * cin + ci) * d * h * w;
            let w_base = (ci * cout + co) * 8;
            for a in 0..2 {
                for b2 in 0..2 {
                    for c in 0..2 {
                        let wv = weight[w_base + (a * 2 + b2) * 2 + c];
                        if wv == 0.0 {
                            continue;
                        }
                        for di in 0..d {
                            for hi in 0..h {
                                let in_row = &input[in_base + (di * h + hi) * w..][..w];
                                let out_row_base =
                                    ((2 * di + a) * ohm + (2 * hi + b2)) * owm + c;
                                for (wi, iv) in in_row.iter().enumerate() {
                                    out_plane[out_row_base + 2 * wi] += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    let work = out.len() * cin * 8;
    if work < 32_768 || n * cout < 2 {
        for (flat, out_plane) in out.chunks_exact_mut(plane).enumerate() {
            task(flat, out_plane);
        }
    } else {
        out.par_chunks_exact_mut(plane)
            .enumerate()
            .for_each(|(flat, out_plane)| task(flat, out_plane));
    }
    (out, vec![n, cout, odm, ohm, owm])
}

pub fn conv_transpose2_backward_input(
    grad_out: &[f32],
    in_shape: &[usize],
    weight: &[f32],
    cout: usize,
) -> Vec<f32> {
    let (n, cin) = (in_shape[0], in_shape[1]);
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let (ohm, owm) = (2 * h, 2 * w);
    let mut din = vec![0.0f32; n * cin * d * h * w];
    let plane = d * h * w;

    let task = |flat: usize, din_plane: &mut [f32]| {
        let ni = flat / cin;
        let ci = flat % cin;
        for co in 0..cout {
            let go_base = (ni * cout + co) * 2 * d * ohm * owm;
            let w_base = (ci * cout + co) * 8;
            for a in 0..2 {
                for b2 in 0..2 {
                    for c in 0..2 {
                        let wv = weight[w_base + (a * 2 + b2) * 2 + c];
                        if wv == 0.0 {
                            continue;
                        }
                        for di in 0..d {
                            for hi in 0..h {
                                let go_row_base =
                                    go_base + ((2 * di + a) * ohm + (2 * hi + b2)) * owm + c;
                                let din_row = &mut din_plane[(di * h + hi) * w..][..w];
                                for (wi, dv) in din_row.iter_mut().enumerate() {
                                    *dv += wv * grad_out[go_row_base + 2 * wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    let work = din.len() * cout * 8;
    if work < 32_768 || n * cin < 2 {
        for (flat, din_plane) in din.chunks_exact_mut(plane).enumerate() {
            task(flat, din_plane);
        }
    } else {
        din.par_chunks_exact_mut(plane)
            .enumerate()
            .for_each(|(flat, din_plane)| task(flat, din_plane));
    }
    din
}

pub fn conv_transpose2_backward_weight(
    input: &[f32],
    in_shape: &[usize],
    grad_out: &[f32],
    cout: usize,
    want_bias: bool,
) -> (Vec<f32>, Option<Vec<f32>>) {
    let (n, cin) = (in_shape[0], in_shape[1]);
    let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
    let (ohm, owm) = (2 * h, 2 * w);
    let mut dweight = vec![0.0f32; cin * cout * 8];

    let task = |widx: usize, dw_out: &mut f32| {
        let ci = widx / (cout * 8);
        let co = (widx / 8) % cout;
        let a = (widx >> 2) & 1;
        let b2 = (widx >> 1) & 1;
        let c = widx & 1;
        let mut acc = 0.0f64;
        for ni in 0..n {
            let in_base = (ni * cin + ci) * d * h * w;
            let go_base = (ni * cout + co) * 2 * d * ohm * owm;
            for di in 0..d {
                for hi in 0..h {
                    let in_row = &input[in_base + (di * h + hi) * w..][..w];
                    let go_row_base = go_base + ((2 * di + a) * ohm + (2 * hi + b2)) * owm + c;
                    let mut row_acc = 0.0f32;
                    for (wi, iv) in in_row.iter().enumerate() {
                        row_acc += iv * grad_out[go_row_base + 2 * wi];
                    }
                    acc += row_acc as f64;
                }
            }
        }
        *dw_out = acc as f32;
    };

    if dweight.len() < 2 || dweight.len() * n * d * h * w < 32_768 {
        for (widx, dw_out) in dweight.iter_mut().enumerate() {
            task(widx, dw_out);
        }
    } else {
        dweight
            .par_iter_mut()
            .enumerate()
            .for_each(|(widx, dw_out)| task(widx, dw_out));
    }

    let dbias = want_bias.then(|| {
        let plane = 8 * d * h * w;
        (0..cout)
            .map(|co| {
                let mut acc = 0.0f64;
                for ni in 0..n {
                    let base = (ni * cout + co) * plane;
                    for &g in &grad_out[base..base + plane] {
                        acc += g as f64;
                    }
                }
                acc as f32
            })
            .collect()
    });
    (dweight, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent 7-loop reference convolution, no fast paths.
    pub fn naive_conv3d(
        input: &[f32],
        in_shape: &[usize],
        weight: &[f32],
        w_shape: &[usize],
        bias: Option<&[f32]>,
        spec: &ConvSpec,
    ) -> (Vec<f32>, Vec<usize>) {
        let dims = conv3d_output_dims(in_shape, w_shape, spec).unwrap();
        let (n, cin) = (in_shape[0], in_shape[1]);
        let (d, h, w) = (in_shape[2], in_shape[3], in_shape[4]);
        let cout = w_shape[0];
        let (kd, kh, kw) = (w_shape[2], w_shape[3], w_shape[4]);
        let cin_g = cin / spec.groups;
        let cout_g = cout / spec.groups;
        let [od, oh, ow] = dims;
        let mut out = vec![0.0f32; n * cout * od * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                let g = co / cout_g;
                for odi in 0..od {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut acc = bias.map_or(0.0, |b| b[co]);
                            for cig in 0..cin_g {
                                let ci = g * cin_g + cig;
                                for ki in 0..kd {
                                    for kj in 0..kh {
                                        for kk in 0..kw {
                                            let id = (odi * spec.stride[0] + ki * spec.dilation[0])
                                                as isize
                                                - spec.padding[0] as isize;
                                            let ih = (ohi * spec.stride[1] + kj * spec.dilation[1])
                                                as isize
                                                - spec.padding[1] as isize;
                                            let iw = (owi * spec.stride[2] + kk * spec.dilation[2])
                                                as isize
                                                - spec.padding[2] as isize;
                                            if id < 0
                                                || ih < 0
                                                || iw < 0
                                                || id >= d as isize
                                                || ih >= h as isize
                                                || iw >= w as isize
                                            {
                                                continue;
                                            }
                                            let iv = input[(((ni * cin + ci) * d + id as usize) * h
                                                + ih as usize)
                                                * w
                                                + iw as usize];
                                            let wv = weight[(((co * cin_g + cig) * kd + ki) * kh
                                                + kj)
                                                * kw
                                                + kk];
                                            acc += iv * wv;
                                        }
                                    }
                                }
                            }
                            out[(((ni * cout + co) * od + odi) * oh + ohi) * ow + owi] = acc;
                        }
                    }
                }
            }
        }
        (out, vec![n, cout, od, oh, ow])
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect()
    }

    #[test]
    fn pointwise_kernel_scales_input() {
        let input = vec![1.0f32; 64];
        let (out, shape) = conv3d_forward(
            &input,
            &[1, 1, 4, 4, 4],
            &[2.0],
            &[1, 1, 1, 1, 1],
            None,
            &ConvSpec::default(),
        )
        .unwrap();
        assert_eq!(shape, vec![1, 1, 4, 4, 4]);
        assert!(out.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn dilated_same_padding_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = rand_vec(125, &mut rng);
        let weight = rand_vec(27, &mut rng);
        let spec = ConvSpec {
            padding: [2, 2, 2],
            dilation: [2, 2, 2],
            ..Default::default()
        };
        let (_, shape) = conv3d_forward(
            &input,
            &[1, 1, 5, 5, 5],
            &weight,
            &[1, 1, 3, 3, 3],
            None,
            &spec,
        )
        .unwrap();
        assert_eq!(shape, vec![1, 1, 5, 5, 5]);
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(spec, in_shape, w_shape) in &[
            (
                ConvSpec::padded([1, 1, 1]),
                [1usize, 2, 4, 4, 4],
                [3usize, 2, 3, 3, 3],
            ),
            (
                ConvSpec {
                    stride: [2, 2, 2],
                    ..Default::default()
                },
                [2, 3, 5, 6, 7],
                [4, 3, 2, 2, 2],
            ),
            (
                ConvSpec {
                    padding: [2, 2, 2],
                    dilation: [2, 2, 2],
                    ..Default::default()
                },
                [1, 2, 6, 6, 6],
                [2, 2, 3, 3, 3],
            ),
            (ConvSpec::grouped(3), [1, 3, 4, 4, 4], [3, 1, 1, 1, 1]),
        ] {
            let input = rand_vec(in_shape.iter().product(), &mut rng);
            let weight = rand_vec(w_shape.iter().product(), &mut rng);
            let bias = rand_vec(w_shape[0], &mut rng);
            let (out, oshape) =
                conv3d_forward(&input, &in_shape, &weight, &w_shape, Some(&bias), &spec).unwrap();
            let (expect, eshape) =
                naive_conv3d(&input, &in_shape, &weight, &w_shape, Some(&bias), &spec);
            assert_eq!(oshape, eshape);
            for (a, b) in out.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b} with spec {spec:?}");
            }
        }
    }

    #[test]
    fn kernel_span_violation_reports_both_shapes() {
        let err = conv3d_output_dims(
            &[1, 1, 2, 8, 8],
            &[1, 1, 3, 3, 3],
            &ConvSpec::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x1x2x8x8"), "{msg}");
        assert!(msg.contains("1x1x3x3x3"), "{msg}");
    }

    #[test]
    fn transpose_doubles_each_dim_and_copies_blocks() {
        // identity-like weight: all 8 taps 1.0, one channel, ones input
        let input = vec![1.0f32; 8];
        let (out, shape) =
            conv_transpose2_forward(&input, &[1, 1, 2, 2, 2], &[1.0f32; 8], None);
        assert_eq!(shape, vec![1, 1, 4, 4, 4]);
        assert!(out.iter().all(|&v| v == 1.0));

        // distinct voxels copy into their 2x2x2 block
        let input = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let (out, _) = conv_transpose2_forward(&input, &[1, 1, 2, 2, 2], &[1.0f32; 8], None);
        // voxel (d,h,w)=(1,1,1) value 8 fills out[2..4, 2..4, 2..4]
        assert_eq!(out[(3 * 4 + 3) * 4 + 3], 8.0);
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn transpose_rejects_non_doubling_config() {
        let err =
            conv_transpose2_output_dims(&[1, 1, 2, 2, 2], &[1, 1, 2, 2, 2], 3, 2).unwrap_err();
        assert!(matches!(err, TensorError::UnsupportedConfig(_)));
    }

    /// Scatter-add reference for the transposed conv.
    #[test]
    fn transpose_matches_scatter_add_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let in_shape = [2usize, 3, 2, 3, 2];
        let cout = 2;
        let input = rand_vec(in_shape.iter().product(), &mut rng);
        let weight = rand_vec(3 * cout * 8, &mut rng);
        let bias = rand_vec(cout, &mut rng);
        let (out, oshape) = conv_transpose2_forward(&input, &in_shape, &weight, Some(&bias));

        let (n, cin, d, h, w) = (2, 3, 2, 3, 2);
        let (odm, ohm, owm) = (2 * d, 2 * h, 2 * w);
        let mut expect = vec![0.0f32; n * cout * odm * ohm * owm];
        for (co, e) in expect.chunks_exact_mut(odm * ohm * owm).enumerate() {
            e.fill(bias[co % cout]);
        }
        for ni in 0..n {
            for ci in 0..cin {
                for di in 0..d {
                    for hi in 0..h {
                        for wi in 0..w {
                            let iv = input[(((ni * cin + ci) * d + di) * h + hi) * w + wi];
                            for co in 0..cout {
                                for a in 0..2 {
                                    for b in 0..2 {
                                        for c in 0..2 {
                                            let wv = weight[(ci * cout + co) * 8 + (a * 2 + b) * 2 + c];
                                            let oi = (((ni * cout + co) * odm + 2 * di + a) * ohm
                                                + 2 * hi
                                                + b)
                                                * owm
                                                + 2 * wi
                                                + c;
                                            expect[oi] += iv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(oshape, vec![n, cout, odm, ohm, owm]);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
