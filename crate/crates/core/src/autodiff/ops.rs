//! Tensor operations with forward kernels and hand-derived backward rules.

use super::{expect_2d, Tensor};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ── raw 2-D kernels ─────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += av * bj;
            }
        }
    }
    c
}

/// dA[m,k] = dC[m,n] · Bᵀ  (B is [k,n])
fn mm_bt(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (dj, bj) in dcrow.iter().zip(brow) {
                acc += dj * bj;
            }
            darow[p] = acc;
        }
    }
    da
}

/// dB[k,n] = Aᵀ · dC  (A is [m,k])
fn mm_at(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbj, dj) in dbrow.iter_mut().zip(dcrow) {
                *dbj += av * dj;
            }
        }
    }
    db
}

// ── elementwise ─────────────────────────────────────────────────────

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    let data: Vec<f64> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::result(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |_, up| {
            if pa.tracked() {
                pa.accumulate_grad(up);
            }
            if pb.tracked() {
                pb.accumulate_grad(up);
            }
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "sub")?;
    let data: Vec<f64> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::result(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |_, up| {
            if pa.tracked() {
                pa.accumulate_grad(up);
            }
            if pb.tracked() {
                let neg: Vec<f64> = up.iter().map(|g| -g).collect();
                pb.accumulate_grad(&neg);
            }
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "mul")?;
    let data: Vec<f64> = {
        let (av, bv) = (a.data(), b.data());
        av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::result(
        data,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |_, up| {
            if pa.tracked() {
                let bv = pb.data();
                let g: Vec<f64> = up.iter().zip(bv.iter()).map(|(u, y)| u * y).collect();
                drop(bv);
                pa.accumulate_grad(&g);
            }
            if pb.tracked() {
                let av = pa.data();
                let g: Vec<f64> = up.iter().zip(av.iter()).map(|(u, x)| u * x).collect();
                drop(av);
                pb.accumulate_grad(&g);
            }
        }),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().map(|x| x * c).collect();
    let pa = a.clone();
    Tensor::result(
        data,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |_, up| {
            if pa.tracked() {
                let g: Vec<f64> = up.iter().map(|u| u * c).collect();
                pa.accumulate_grad(&g);
            }
        }),
    )
}

/// x[n,d] + b[d], broadcast over rows.
pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = expect_2d(x, "add_bias input")?;
    if b.shape() != [d] {
        return Err(Error::shape(format!(
            "add_bias: bias shape {:?} does not match width {d}",
            b.shape()
        )));
    }
    let data: Vec<f64> = {
        let (xv, bv) = (x.data(), b.data());
        xv.chunks_exact(d)
            .flat_map(|row| row.iter().zip(bv.iter()).map(|(v, w)| v + w).collect::<Vec<_>>())
            .collect()
    };
    let (px, pb) = (x.clone(), b.clone());
    Ok(Tensor::result(
        data,
        vec![n, d],
        vec![x.clone(), b.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                px.accumulate_grad(up);
            }
            if pb.tracked() {
                let mut g = vec![0.0; d];
                for row in up.chunks_exact(d) {
                    for (gi, ui) in g.iter_mut().zip(row) {
                        *gi += ui;
                    }
                }
                pb.accumulate_grad(&g);
            }
        }),
    ))
}

// ── linear algebra ──────────────────────────────────────────────────

/// Standard matrix product; gradients dA = dC·Bᵀ, dB = Aᵀ·dC.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = expect_2d(a, "matmul lhs")?;
    let (k2, n) = expect_2d(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dims disagree ({m}x{k} · {k2}x{n})"
        )));
    }
    let data = mm(&a.data(), &b.data(), m, k, n);
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::result(
        data,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |_, up| {
            if pa.tracked() {
                let g = mm_bt(up, &pb.data(), m, k, n);
                pa.accumulate_grad(&g);
            }
            if pb.tracked() {
                let g = mm_at(&pa.data(), up, m, k, n);
                pb.accumulate_grad(&g);
            }
        }),
    ))
}

pub fn transpose2d(a: &Tensor) -> Result<Tensor> {
    let (m, n) = expect_2d(a, "transpose input")?;
    let av = a.data();
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = av[i * n + j];
        }
    }
    drop(av);
    let pa = a.clone();
    Ok(Tensor::result(
        data,
        vec![n, m],
        vec![a.clone()],
        Box::new(move |_, up| {
            if pa.tracked() {
                let mut g = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        g[i * n + j] = up[j * m + i];
                    }
                }
                pa.accumulate_grad(&g);
            }
        }),
    ))
}

/// Columns [start, start+len) of a 2-D tensor.
pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (n, d) = expect_2d(x, "slice_cols input")?;
    if start + len > d {
        return Err(Error::shape(format!(
            "slice_cols: [{start}, {}) out of width {d}",
            start + len
        )));
    }
    let xv = x.data();
    let mut data = Vec::with_capacity(n * len);
    for row in xv.chunks_exact(d) {
        data.extend_from_slice(&row[start..start + len]);
    }
    drop(xv);
    let px = x.clone();
    Ok(Tensor::result(
        data,
        vec![n, len],
        vec![x.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                let mut g = vec![0.0; n * d];
                for (i, row) in up.chunks_exact(len).enumerate() {
                    g[i * d + start..i * d + start + len].copy_from_slice(row);
                }
                px.accumulate_grad(&g);
            }
        }),
    ))
}

/// Concatenate 2-D tensors with equal row counts along the column axis.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols: no inputs".to_string()));
    }
    let (n, _) = expect_2d(&parts[0], "concat_cols input")?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (np, dp) = expect_2d(p, "concat_cols input")?;
        if np != n {
            return Err(Error::shape(format!(
                "concat_cols: row counts differ ({n} vs {np})"
            )));
        }
        widths.push(dp);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for i in 0..n {
        for (p, w) in parts.iter().zip(&widths) {
            let pv = p.data();
            data.extend_from_slice(&pv[i * w..(i + 1) * w]);
        }
    }
    let owned: Vec<Tensor> = parts.to_vec();
    let widths_b = widths.clone();
    Ok(Tensor::result(
        data,
        vec![n, total],
        owned.clone(),
        Box::new(move |_, up| {
            let mut offset = 0;
            for (p, &w) in owned.iter().zip(&widths_b) {
                if p.tracked() {
                    let mut g = vec![0.0; n * w];
                    for i in 0..n {
                        g[i * w..(i + 1) * w]
                            .copy_from_slice(&up[i * total + offset..i * total + offset + w]);
                    }
                    p.accumulate_grad(&g);
                }
                offset += w;
            }
        }),
    ))
}

// ── nonlinearities ──────────────────────────────────────────────────

/// Softmax along the last axis, stabilized by max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let n = *shape
        .last()
        .ok_or_else(|| Error::shape("softmax on 0-d tensor".to_string()))?;
    if n == 0 {
        return Err(Error::shape("softmax over empty axis".to_string()));
    }
    let xv = x.data();
    let mut data = Vec::with_capacity(xv.len());
    for row in xv.chunks_exact(n) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / s));
    }
    drop(xv);
    let px = x.clone();
    Ok(Tensor::result(
        data,
        shape,
        vec![x.clone()],
        Box::new(move |out, up| {
            if px.tracked() {
                let y = out.data();
                let mut g = vec![0.0; y.len()];
                for ((grow, yrow), urow) in
                    g.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(up.chunks_exact(n))
                {
                    let dot: f64 = urow.iter().zip(yrow).map(|(u, y)| u * y).sum();
                    for ((gi, &yi), &ui) in grow.iter_mut().zip(yrow).zip(urow) {
                        *gi = yi * (ui - dot);
                    }
                }
                drop(y);
                px.accumulate_grad(&g);
            }
        }),
    ))
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let d = *shape
        .last()
        .ok_or_else(|| Error::shape("layer_norm on 0-d tensor".to_string()))?;
    if d == 0 {
        return Err(Error::shape("layer_norm over empty axis".to_string()));
    }
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape(format!(
            "layer_norm: gain {:?} / bias {:?} do not match width {d}",
            gain.shape(),
            bias.shape()
        )));
    }
    let xv = x.data();
    let gv = gain.data();
    let bv = bias.data();
    let rows = xv.len() / d;
    let mut data = Vec::with_capacity(xv.len());
    let mut normed = Vec::with_capacity(xv.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in xv.chunks_exact(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        for (j, v) in row.iter().enumerate() {
            let xn = (v - mean) * istd;
            normed.push(xn);
            data.push(xn * gv[j] + bv[j]);
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    let (px, pg, pb) = (x.clone(), gain.clone(), bias.clone());
    Ok(Tensor::result(
        data,
        shape,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |_, up| {
            if pb.tracked() {
                let mut g = vec![0.0; d];
                for row in up.chunks_exact(d) {
                    for (gi, ui) in g.iter_mut().zip(row) {
                        *gi += ui;
                    }
                }
                pb.accumulate_grad(&g);
            }
            if pg.tracked() {
                let mut g = vec![0.0; d];
                for (urow, xrow) in up.chunks_exact(d).zip(normed.chunks_exact(d)) {
                    for ((gi, ui), xi) in g.iter_mut().zip(urow).zip(xrow) {
                        *gi += ui * xi;
                    }
                }
                pg.accumulate_grad(&g);
            }
            if px.tracked() {
                let gv = pg.data();
                let mut g = vec![0.0; up.len()];
                for (r, (urow, xrow)) in
                    up.chunks_exact(d).zip(normed.chunks_exact(d)).enumerate()
                {
                    // dxn = up ⊙ gain; dx = istd (dxn − mean(dxn) − xn·mean(dxn⊙xn))
                    let istd = inv_std[r];
                    let dxn: Vec<f64> = urow.iter().zip(gv.iter()).map(|(u, gj)| u * gj).collect();
                    let m1 = dxn.iter().sum::<f64>() / d as f64;
                    let m2 = dxn.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    let grow = &mut g[r * d..(r + 1) * d];
                    for ((gi, &di), &xi) in grow.iter_mut().zip(&dxn).zip(xrow) {
                        *gi = istd * (di - m1 - xi * m2);
                    }
                }
                drop(gv);
                px.accumulate_grad(&g);
            }
        }),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
    let px = x.clone();
    Tensor::result(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                let xv = px.data();
                let g: Vec<f64> = up
                    .iter()
                    .zip(xv.iter())
                    .map(|(u, v)| if *v > 0.0 { *u } else { 0.0 })
                    .collect();
                drop(xv);
                px.accumulate_grad(&g);
            }
        }),
    )
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gated linear unit over columns: x[n,2d] → x[:, :d] ⊙ σ(x[:, d:]).
pub fn glu_cols(x: &Tensor) -> Result<Tensor> {
    let (n, w) = expect_2d(x, "glu input")?;
    if w % 2 != 0 {
        return Err(Error::shape(format!("glu: odd width {w}")));
    }
    let d = w / 2;
    let xv = x.data();
    let mut data = Vec::with_capacity(n * d);
    for row in xv.chunks_exact(w) {
        for j in 0..d {
            data.push(row[j] * sigmoid(row[d + j]));
        }
    }
    drop(xv);
    let px = x.clone();
    Ok(Tensor::result(
        data,
        vec![n, d],
        vec![x.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                let xv = px.data();
                let mut g = vec![0.0; n * w];
                for (i, urow) in up.chunks_exact(d).enumerate() {
                    let xrow = &xv[i * w..(i + 1) * w];
                    let grow = &mut g[i * w..(i + 1) * w];
                    for j in 0..d {
                        let s = sigmoid(xrow[d + j]);
                        grow[j] = urow[j] * s;
                        grow[d + j] = urow[j] * xrow[j] * s * (1.0 - s);
                    }
                }
                drop(xv);
                px.accumulate_grad(&g);
            }
        }),
    ))
}

// ── lookup and reshaping ────────────────────────────────────────────

/// Row lookup: table[V,d] gathered at `ids` → [len(ids), d].
pub fn embedding(table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let (v, d) = expect_2d(table, "embedding table")?;
    let tv = table.data();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let id = id as usize;
        if id >= v {
            return Err(Error::contract(format!(
                "embedding id {id} out of vocabulary size {v}"
            )));
        }
        data.extend_from_slice(&tv[id * d..(id + 1) * d]);
    }
    drop(tv);
    let pt = table.clone();
    let ids_b: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(Tensor::result(
        data,
        vec![ids.len(), d],
        vec![table.clone()],
        Box::new(move |_, up| {
            if pt.tracked() {
                let mut g = vec![0.0; v * d];
                for (&id, urow) in ids_b.iter().zip(up.chunks_exact(d)) {
                    for (gi, ui) in g[id * d..(id + 1) * d].iter_mut().zip(urow) {
                        *gi += ui;
                    }
                }
                pt.accumulate_grad(&g);
            }
        }),
    ))
}

/// 1-D convolution over the time axis.
///
/// x[T, c_in], w[c_out, k, c_in], b[c_out]; output [(T + 2·pad − k)/stride + 1, c_out].
pub fn conv1d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (t, c_in) = expect_2d(x, "conv1d input")?;
    let (c_out, k, c_in2) = match w.shape() {
        [o, k, i] => (*o, *k, *i),
        s => return Err(Error::shape(format!("conv1d weight must be 3-D, got {s:?}"))),
    };
    if c_in != c_in2 {
        return Err(Error::shape(format!(
            "conv1d: input channels {c_in} vs weight channels {c_in2}"
        )));
    }
    if b.shape() != [c_out] {
        return Err(Error::shape(format!("conv1d: bias shape {:?}", b.shape())));
    }
    if t + 2 * pad < k {
        return Err(Error::contract(format!(
            "conv1d: {t} frames below receptive field (kernel {k}, pad {pad})"
        )));
    }
    let t_out = (t + 2 * pad - k) / stride + 1;
    let (xv, wv, bv) = (x.data(), w.data(), b.data());
    let mut data = vec![0.0; t_out * c_out];
    for o in 0..t_out {
        let base = (o * stride) as isize - pad as isize;
        let orow = &mut data[o * c_out..(o + 1) * c_out];
        orow.copy_from_slice(&bv);
        for tap in 0..k {
            let ti = base + tap as isize;
            if ti < 0 || ti >= t as isize {
                continue;
            }
            let xrow = &xv[ti as usize * c_in..(ti as usize + 1) * c_in];
            for (oc, oval) in orow.iter_mut().enumerate() {
                let wrow = &wv[(oc * k + tap) * c_in..(oc * k + tap + 1) * c_in];
                let mut acc = 0.0;
                for (xi, wi) in xrow.iter().zip(wrow) {
                    acc += xi * wi;
                }
                *oval += acc;
            }
        }
    }
    drop(xv);
    drop(wv);
    drop(bv);
    let (px, pw, pb) = (x.clone(), w.clone(), b.clone());
    Ok(Tensor::result(
        data,
        vec![t_out, c_out],
        vec![x.clone(), w.clone(), b.clone()],
        Box::new(move |_, up| {
            if pb.tracked() {
                let mut g = vec![0.0; c_out];
                for urow in up.chunks_exact(c_out) {
                    for (gi, ui) in g.iter_mut().zip(urow) {
                        *gi += ui;
                    }
                }
                pb.accumulate_grad(&g);
            }
            let xv = px.data();
            let wv = pw.data();
            let mut gx = vec![0.0; t * c_in];
            let mut gw = vec![0.0; c_out * k * c_in];
            for o in 0..t_out {
                let base = (o * stride) as isize - pad as isize;
                let urow = &up[o * c_out..(o + 1) * c_out];
                for tap in 0..k {
                    let ti = base + tap as isize;
                    if ti < 0 || ti >= t as isize {
                        continue;
                    }
                    let ti = ti as usize;
                    let xrow = &xv[ti * c_in..(ti + 1) * c_in];
                    for (oc, &uo) in urow.iter().enumerate() {
                        let wrow = &wv[(oc * k + tap) * c_in..(oc * k + tap + 1) * c_in];
                        let gxrow = &mut gx[ti * c_in..(ti + 1) * c_in];
                        for ((gxi, wi), _) in gxrow.iter_mut().zip(wrow).zip(xrow) {
                            *gxi += uo * wi;
                        }
                        let gwrow = &mut gw[(oc * k + tap) * c_in..(oc * k + tap + 1) * c_in];
                        for (gwi, xi) in gwrow.iter_mut().zip(xrow) {
                            *gwi += uo * xi;
                        }
                    }
                }
            }
            drop(xv);
            drop(wv);
            if px.tracked() {
                px.accumulate_grad(&gx);
            }
            if pw.tracked() {
                pw.accumulate_grad(&gw);
            }
        }),
    ))
}

// ── reductions ──────────────────────────────────────────────────────

pub fn sum(x: &Tensor) -> Tensor {
    let s: f64 = x.data().iter().sum();
    let px = x.clone();
    Tensor::result(
        vec![s],
        vec![1],
        vec![x.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                let g = vec![up[0]; px.numel()];
                px.accumulate_grad(&g);
            }
        }),
    )
}

pub fn mean(x: &Tensor) -> Tensor {
    let n = x.numel() as f64;
    let s: f64 = x.data().iter().sum::<f64>() / n;
    let px = x.clone();
    Tensor::result(
        vec![s],
        vec![1],
        vec![x.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                let g = vec![up[0] / n; px.numel()];
                px.accumulate_grad(&g);
            }
        }),
    )
}

/// Inverted dropout: zeroes elements with probability `p` and rescales the
/// rest by 1/(1−p). Training-time only; pass-through at p = 0.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Tensor {
    if p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    let data: Vec<f64> = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let px = x.clone();
    Tensor::result(
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |_, up| {
            if px.tracked() {
                let g: Vec<f64> = up.iter().zip(&mask).map(|(u, m)| u * m).collect();
                px.accumulate_grad(&g);
            }
        }),
    )
}

// ── loss ────────────────────────────────────────────────────────────

/// How a token-level loss collapses to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Mean over non-pad positions (the documented loss definition).
    MeanNonPad,
    /// Sum over non-pad positions (used for count-weighted accumulation).
    SumNonPad,
}

/// Label-smoothed cross entropy over logits[t, V].
///
/// Per non-pad position: (1−ε)·NLL(target) + ε·mean over the vocabulary of
/// NLL. Pad positions are excluded from both the loss and the normalizer.
pub fn cross_entropy_label_smoothed(
    logits: &Tensor,
    targets: &[u32],
    epsilon: f64,
    pad_id: u32,
    reduction: Reduction,
) -> Result<Tensor> {
    let (t, v) = expect_2d(logits, "cross entropy logits")?;
    if targets.len() != t {
        return Err(Error::shape(format!(
            "cross entropy: {t} logit rows vs {} targets",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::contract(format!(
            "label smoothing epsilon {epsilon} outside [0, 1)"
        )));
    }
    for &tok in targets {
        if tok as usize >= v {
            return Err(Error::contract(format!(
                "target id {tok} out of vocabulary size {v}"
            )));
        }
    }
    let xv = logits.data();
    let nonpad = targets.iter().filter(|&&tok| tok != pad_id).count();
    let mut probs = vec![0.0; t * v];
    let mut total = 0.0;
    for (i, &tok) in targets.iter().enumerate() {
        let row = &xv[i * v..(i + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &val in row {
            z += (val - m).exp();
        }
        let lse = m + z.ln();
        for (j, &val) in row.iter().enumerate() {
            probs[i * v + j] = (val - lse).exp();
        }
        if tok == pad_id {
            continue;
        }
        let logp_target = row[tok as usize] - lse;
        let mean_logp = row.iter().map(|&val| val - lse).sum::<f64>() / v as f64;
        total += -((1.0 - epsilon) * logp_target + epsilon * mean_logp);
    }
    drop(xv);
    let value = match reduction {
        Reduction::MeanNonPad => {
            if nonpad == 0 {
                0.0
            } else {
                total / nonpad as f64
            }
        }
        Reduction::SumNonPad => total,
    };
    let pl = logits.clone();
    let targets_b = targets.to_vec();
    Ok(Tensor::result(
        vec![value],
        vec![1],
        vec![logits.clone()],
        Box::new(move |_, up| {
            if !pl.tracked() {
                return;
            }
            let w = match reduction {
                Reduction::MeanNonPad => {
                    if nonpad == 0 {
                        return;
                    }
                    up[0] / nonpad as f64
                }
                Reduction::SumNonPad => up[0],
            };
            let mut g = vec![0.0; t * v];
            let uniform = epsilon / v as f64;
            for (i, &tok) in targets_b.iter().enumerate() {
                if tok == pad_id {
                    continue;
                }
                let prow = &probs[i * v..(i + 1) * v];
                let grow = &mut g[i * v..(i + 1) * v];
                for (j, (gi, &pj)) in grow.iter_mut().zip(prow).enumerate() {
                    let q = uniform + if j == tok as usize { 1.0 - epsilon } else { 0.0 };
                    *gi = w * (pj - q);
                }
            }
            pl.accumulate_grad(&g);
        }),
    ))
}

/// Count of non-pad targets, the normalizer used by the mean reduction.
pub fn nonpad_count(targets: &[u32], pad_id: u32) -> usize {
    targets.iter().filter(|&&t| t != pad_id).count()
}

/// Log-softmax of a single row, for scoring during decoding.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    let lse = m + z.ln();
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i2 = tensor(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let out = matmul(&i2, &i2).unwrap();
        assert_eq!(out.value(), vec![1.0, 0.0, 0.0, 1.0]);

        let a = tensor(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let out = matmul(&a, &i2).unwrap();
        assert_eq!(out.value(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = tensor(&[0.0; 6], &[2, 3]);
        let b = tensor(&[0.0; 8], &[2, 4]);
        assert!(matches!(matmul(&a, &b), Err(crate::error::Error::Shape(_))));
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = tensor(&[0.0, 0.0, 0.0], &[3]);
        let y = softmax_last(&x).unwrap();
        for v in y.value() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let x = tensor(&[1000.0, 0.0], &[2]);
        let y = softmax_last(&x).unwrap().value();
        assert!(y[0] > 1.0 - 1e-12 && y[0].is_finite());
        assert!(y[1] < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = tensor(&[0.3, -2.0, 5.0, 1.0, 1.0, 1.0], &[2, 3]);
        let y = softmax_last(&x).unwrap().value();
        for row in y.chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = tensor(&[5.0, 5.0, 5.0, 5.0], &[4]);
        let g = tensor(&[1.0; 4], &[4]);
        let b = tensor(&[0.0; 4], &[4]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap().value();
        for v in y {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, var 1 → normalized to ±1 modulo the eps correction
        let x = tensor(&[1.0, 3.0], &[2]);
        let g = tensor(&[1.0, 1.0], &[2]);
        let b = tensor(&[0.0, 0.0], &[2]);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap().value();
        assert!((y[0] + 1.0).abs() < 1e-4);
        assert!((y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn glu_halves_width() {
        let x = tensor(&[1.0, 2.0, 0.0, 0.0], &[1, 4]);
        let y = glu_cols(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        // gate is σ(0) = 0.5
        assert_eq!(y.value(), vec![0.5, 1.0]);
    }

    #[test]
    fn conv1d_length_formula() {
        // kernel 5, pad 2, stride 2 applied twice: 16 → 8 → 4
        let x = tensor(&vec![0.0; 16 * 3], &[16, 3]);
        let w = tensor(&vec![0.0; 4 * 5 * 3], &[4, 5, 3]);
        let b = tensor(&[0.0; 4], &[4]);
        let y = conv1d(&x, &w, &b, 2, 2).unwrap();
        assert_eq!(y.shape(), &[8, 4]);
        let w2 = tensor(&vec![0.0; 4 * 5 * 4], &[4, 5, 4]);
        let y2 = conv1d(&y, &w2, &b, 2, 2).unwrap();
        assert_eq!(y2.shape(), &[4, 4]);
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        // huge margin on the target → loss ≈ 0 at ε = 0
        let logits = tensor(&[100.0, 0.0, 0.0, 0.0], &[1, 4]);
        let loss = cross_entropy_label_smoothed(&logits, &[0], 0.0, 99, Reduction::MeanNonPad)
            .unwrap();
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_v() {
        let logits = tensor(&[0.5; 8], &[2, 4]);
        for eps in [0.0, 0.1, 0.7] {
            let loss =
                cross_entropy_label_smoothed(&logits, &[1, 3], eps, 99, Reduction::MeanNonPad)
                    .unwrap();
            assert!((loss.item() - 4.0_f64.ln()).abs() < 1e-12, "eps {eps}");
        }
    }

    #[test]
    fn cross_entropy_matches_plain_ce_at_zero_epsilon() {
        // independent oracle: direct −log softmax[target]
        let data = [0.2, -1.0, 0.7, 3.0, 0.0, -0.5, 1.1, 0.4];
        let logits = tensor(&data, &[2, 4]);
        let targets = [2u32, 0u32];
        let loss =
            cross_entropy_label_smoothed(&logits, &targets, 0.0, 99, Reduction::MeanNonPad)
                .unwrap();
        let mut oracle = 0.0;
        for (row, &tok) in data.chunks(4).zip(&targets) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle += -(row[tok as usize].exp() / z).ln();
        }
        oracle /= 2.0;
        assert!((loss.item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = tensor(&[0.0; 4], &[1, 4]);
        assert!(cross_entropy_label_smoothed(&logits, &[4], 0.0, 99, Reduction::MeanNonPad)
            .is_err());
    }

    #[test]
    fn cross_entropy_excludes_pad() {
        let logits = tensor(&[1.0, 2.0, 3.0, 1.0, 2.0, 3.0], &[2, 3]);
        let with_pad =
            cross_entropy_label_smoothed(&logits, &[2, 0], 0.0, 0, Reduction::MeanNonPad)
                .unwrap();
        let solo = cross_entropy_label_smoothed(
            &tensor(&[1.0, 2.0, 3.0], &[1, 3]),
            &[2],
            0.0,
            0,
            Reduction::MeanNonPad,
        )
        .unwrap();
        assert!((with_pad.item() - solo.item()).abs() < 1e-12);
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let table = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]).unwrap();
        let out = embedding(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.value(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        sum(&out).backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
