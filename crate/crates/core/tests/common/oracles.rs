//! Operators against straightforward FP64 implementations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilegraph::graph::{Epilogue, GraphBuilder};
use tilegraph::numerics::{to_bf16, Rounding, SiluLut};
use tilegraph::ops::{
    adaptive_avgpool_ref, build_conv_subgraph, build_gemm_subgraph, conv_ref, gemm_ref, maxpool2d_ref, pool_layer,
    rnn_layer, rnn_ref, ConvParams, EpiRef, GemmParams, OpCtx, PoolParams, RnnConsts, RnnParams, RnnWeights,
};
use tilegraph::sim::{execute, ExecOptions};
use tilegraph::{ArchSpec, ElemType, Graph, Tensor};

pub const FP32_TOL: f64 = 1e-5;
pub const BF16_TOL: f64 = 1e-2;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

fn rel_l2(got: &[f32], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len());
    let num: f64 = got.iter().zip(want).map(|(&a, &b)| (a as f64 - b).powi(2)).sum();
    let den: f64 = want.iter().map(|b| b * b).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn ctx(e: ElemType, lut: &SiluLut) -> OpCtx<'_> {
    let store = if e == ElemType::Bf16 { Rounding::Bf16 } else { Rounding::F32 };
    OpCtx { store, lut }
}

fn tol(e: ElemType) -> f64 {
    if e == ElemType::Bf16 {
        BF16_TOL
    } else {
        FP32_TOL
    }
}

fn run(g: &Graph, inputs: &[(&str, &Tensor)], e: ElemType) -> Tensor {
    let inputs: BTreeMap<String, Tensor> = inputs.iter().map(|(n, t)| (n.to_string(), (*t).clone())).collect();
    execute(g, &inputs, &ExecOptions::new(e)).unwrap().outputs["Y"].clone()
}

fn sigmoid_lut64(x: f64) -> f64 {
    let (size, range) = (512usize, 8.0f64);
    if x < -range {
        return 0.0;
    }
    if x >= range {
        return 1.0;
    }
    let step = 2.0 * range / size as f64;
    let sample = |i: usize| if i < size { 1.0 / (1.0 + (range - i as f64 * step).exp()) } else { 1.0 };
    let pos = (x + range) / step;
    let i = pos.floor() as usize;
    sample(i) + (sample(i + 1) - sample(i)) * (pos - i as f64)
}

fn silu64(x: f64) -> f64 {
    x * sigmoid_lut64(x)
}

fn tanh64(x: f64) -> f64 {
    if x.abs() > 6.0 {
        return x.signum();
    }
    let x2 = x * x;
    let num = x * (135135.0 + x2 * (17325.0 + x2 * (378.0 + x2)));
    let den = 135135.0 + x2 * (62370.0 + x2 * (3150.0 + 28.0 * x2));
    (num / den).clamp(-1.0, 1.0)
}

/// `[frames, c_in, spatial..]` convolution, stride 1, zero padding.
fn conv64(x: &Tensor, w: &Tensor, p: &ConvParams) -> Vec<f64> {
    let d = p.dims;
    let mut isp = [1usize; 3];
    let mut k = [1usize; 3];
    let mut pad = [0usize; 3];
    for i in 0..d {
        isp[3 - d + i] = p.in_spatial[i];
        k[3 - d + i] = p.kernel[i];
        pad[3 - d + i] = p.padding[i];
    }
    let osp: Vec<usize> = (0..3).map(|i| isp[i] + 2 * pad[i] + 1 - k[i]).collect();
    let mut out = Vec::new();
    for f in 0..p.frames {
        for oc in 0..p.c_out {
            for oz in 0..osp[0] {
                for oy in 0..osp[1] {
                    for ox in 0..osp[2] {
                        let mut s = 0.0f64;
                        for ic in 0..p.c_in {
                            for kz in 0..k[0] {
                                for ky in 0..k[1] {
                                    for kx in 0..k[2] {
                                        let (z, y, xx) = (oz + kz, oy + ky, ox + kx);
                                        if z < pad[0] || y < pad[1] || xx < pad[2] {
                                            continue;
                                        }
                                        let (z, y, xx) = (z - pad[0], y - pad[1], xx - pad[2]);
                                        if z >= isp[0] || y >= isp[1] || xx >= isp[2] {
                                            continue;
                                        }
                                        let xi = (((f * p.c_in + ic) * isp[0] + z) * isp[1] + y) * isp[2] + xx;
                                        let wi = (((oc * p.c_in + ic) * k[0] + kz) * k[1] + ky) * k[2] + kx;
                                        s += x.data[xi] as f64 * w.data[wi] as f64;
                                    }
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
    }
    out
}

fn gemm64(a: &Tensor, w: &Tensor, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a.data[i * k + t] as f64 * w.data[t * n + j] as f64).sum();
        }
    }
    out
}

/// Adaptive average pooling over `planes` planes of extent `inp`.
fn aap64(x: &Tensor, planes: usize, inp: &[usize], out: &[usize]) -> Vec<f64> {
    let win = |o: usize, i: usize, n: usize| {
        let start = (o as f64 * i as f64 / n as f64).floor() as usize;
        let end = ((o + 1) as f64 * i as f64 / n as f64).ceil() as usize;
        start..end
    };
    let mut e_in = [1usize; 3];
    let mut e_out = [1usize; 3];
    let off = 3 - inp.len();
    for d in 0..inp.len() {
        e_in[off + d] = inp[d];
        e_out[off + d] = out[d];
    }
    let in_plane: usize = e_in.iter().product();
    let mut res = Vec::new();
    for pl in 0..planes {
        for a in 0..e_out[0] {
            for b in 0..e_out[1] {
                for c in 0..e_out[2] {
                    let (wa, wb, wc) = (win(a, e_in[0], e_out[0]), win(b, e_in[1], e_out[1]), win(c, e_in[2], e_out[2]));
                    let mut s = 0.0;
                    let mut cnt = 0.0;
                    for i in wa.clone() {
                        for j in wb.clone() {
                            for l in wc.clone() {
                                s += x.data[pl * in_plane + (i * e_in[1] + j) * e_in[2] + l] as f64;
                                cnt += 1.0;
                            }
                        }
                    }
                    res.push(s / cnt);
                }
            }
        }
    }
    res
}

pub fn conv_matches_oracle() {
    let arch = ArchSpec::default();
    let lut = SiluLut::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases = [
        ConvParams::new(3, 2, 5, &[7, 9], &[3, 3], &[1, 1]).with_partition(3, 2, 5),
        ConvParams::new(1, 1, 4, &[6, 5], &[2, 3], &[0, 1]),
        ConvParams::new(1, 3, 4, &[3, 5, 6], &[2, 3, 3], &[1, 1, 1]).with_partition(1, 3, 2),
    ];
    for p in cases {
        let x = random(&p.in_shape(), &mut rng);
        let w = random(&p.weight_shape(), &mut rng);
        let want: Vec<f64> = conv64(&x, &w, &p).into_iter().map(silu64).collect();
        let g = build_conv_subgraph(&p, w.clone(), None, &[Epilogue::Silu], &arch).unwrap();
        for e in [ElemType::F32, ElemType::Bf16] {
            let r = conv_ref(&x.map(|v| ctx(e, &lut).store.apply(v)), &w.map(|v| ctx(e, &lut).store.apply(v)), None, &p, &[EpiRef::Silu], ctx(e, &lut)).unwrap();
            let err = rel_l2(&r.data, &want);
            assert!(err <= tol(e), "{e:?} ref err {err:e} for {p:?}");
            let y = run(&g, &[("X", &x)], e);
            assert!(y.bitwise_eq(&r), "{e:?} graph differs from reference");
        }
    }
}

pub fn gemm_matches_oracle_for_every_cluster_count() {
    let arch = ArchSpec::default();
    let lut = SiluLut::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (m, k, n) in [(1, 256, 24), (1, 192, 7), (8, 64, 12)] {
        let a = random(&[m, k], &mut rng);
        let w = random(&[k, n], &mut rng);
        let want = gemm64(&a, &w, m, k, n);
        for kc in [1, 2, 4, 8] {
            let p = GemmParams::with_clusters(m, k, n, kc);
            let g = build_gemm_subgraph(&p, w.clone(), None, &[], &arch).unwrap();
            for e in [ElemType::F32, ElemType::Bf16] {
                let y = run(&g, &[("X", &a)], e);
                let err = rel_l2(&y.data, &want);
                assert!(err <= tol(e), "{e:?} k_clusters {kc} err {err:e}");
                let r = gemm_ref(&a.map(|v| ctx(e, &lut).store.apply(v)), &w.map(|v| ctx(e, &lut).store.apply(v)), None, &p, &[], ctx(e, &lut)).unwrap();
                assert!(y.bitwise_eq(&r));
            }
        }
    }
}

pub fn adaptive_pool_1d_exhaustive() {
    let lut = SiluLut::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for input in 1..=16 {
        for output in 1..=input {
            let p = PoolParams::adaptive(2, 3, &[input], &[output]).unwrap();
            let x = random(&p.in_shape(), &mut rng);
            let want = aap64(&x, 6, &[input], &[output]);
            let y = adaptive_avgpool_ref(&x, &p, ctx(ElemType::F32, &lut)).unwrap();
            assert_eq!(y.shape, vec![2, 3, output]);
            let err = rel_l2(&y.data, &want);
            assert!(err <= FP32_TOL, "{input}->{output}: {err:e}");
        }
    }
}

pub fn adaptive_pool_2d_3d_grid() {
    let arch = ArchSpec::default();
    let lut = SiluLut::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases: [(&[usize], &[usize]); 8] = [
        (&[21, 31], &[1, 1]),
        (&[10, 15], &[3, 4]),
        (&[7, 7], &[7, 7]),
        (&[9, 5], &[4, 5]),
        (&[4, 21, 31], &[2, 7, 11]),
        (&[3, 8, 8], &[2, 3, 5]),
        (&[5, 6, 7], &[1, 1, 1]),
        (&[2, 16, 9], &[2, 16, 9]),
    ];
    for (inp, out) in cases {
        let p = PoolParams::adaptive(2, 4, inp, out).unwrap().with_grid(2, 2);
        let x = random(&p.in_shape(), &mut rng);
        let want = aap64(&x, 8, inp, out);
        for e in [ElemType::F32, ElemType::Bf16] {
            let r = adaptive_avgpool_ref(&x.map(|v| ctx(e, &lut).store.apply(v)), &p, ctx(e, &lut)).unwrap();
            let err = rel_l2(&r.data, &want);
            assert!(err <= tol(e), "{inp:?}->{out:?} {e:?}: {err:e}");
            let mut b = GraphBuilder::new("pool");
            let xi = b.input("X", &p.in_shape());
            let y = pool_layer(&mut b, "pool", xi, &p, &arch).unwrap();
            b.mark_output("Y", y);
            assert!(run(&b.finish(), &[("X", &x)], e).bitwise_eq(&r));
        }
    }
}

pub fn maxpool_matches_oracle() {
    let lut = SiluLut::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (hw, k, s, pad) in [([20, 30], 2, 2, 0), ([7, 9], 3, 2, 1), ([5, 5], 2, 1, 0)] {
        let p = PoolParams::maxpool2d(2, 3, hw, k, s, pad).unwrap();
        let x = random(&p.in_shape(), &mut rng);
        let y = maxpool2d_ref(&x, &p, ctx(ElemType::F32, &lut)).unwrap();
        let (oh, ow) = (p.out_spatial[0], p.out_spatial[1]);
        let mut want = Vec::new();
        for pl in 0..6 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..k {
                        for dj in 0..k {
                            let (r, c) = ((i * s + di) as isize - pad as isize, (j * s + dj) as isize - pad as isize);
                            if r >= 0 && c >= 0 && (r as usize) < hw[0] && (c as usize) < hw[1] {
                                m = m.max(x.data[pl * hw[0] * hw[1] + r as usize * hw[1] + c as usize] as f64);
                            }
                        }
                    }
                    want.push(m);
                }
            }
        }
        assert_eq!(rel_l2(&y.data, &want), 0.0);
    }
}

pub fn rnn_matches_oracle() {
    let arch = ArchSpec::default();
    let lut = SiluLut::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = RnnParams { input_size: 32, hidden_size: 24, seq_len: 6, has_bias: false, zero_initial_state: true };
    let x = random(&[p.seq_len, p.input_size], &mut rng);
    let w_ih = random(&[p.input_size, p.hidden_size], &mut rng).map(|v| v * 0.3);
    let w_hh = random(&[p.hidden_size, p.hidden_size], &mut rng).map(|v| v * 0.3);
    let (i_n, h_n) = (p.input_size, p.hidden_size);
    let mut h = vec![0.0f64; h_n];
    let mut want = Vec::new();
    for t in 0..p.seq_len {
        let mut next = vec![0.0f64; h_n];
        for (j, v) in next.iter_mut().enumerate() {
            let a: f64 = (0..i_n).map(|q| x.data[t * i_n + q] as f64 * w_ih.data[q * h_n + j] as f64).sum();
            let b: f64 = (0..h_n).map(|q| h[q] * w_hh.data[q * h_n + j] as f64).sum();
            *v = tanh64(a + b);
        }
        h = next;
        want.extend_from_slice(&h);
    }
    let wt = RnnWeights { w_ih: w_ih.clone(), w_hh: w_hh.clone(), b_ih: None, b_hh: None };
    let mut b = GraphBuilder::new("rnn");
    let xi = b.input("X", &[p.seq_len, p.input_size]);
    b.constant("w_ih", w_ih);
    b.constant("w_hh", w_hh);
    let consts = RnnConsts { w_ih: "w_ih", w_hh: "w_hh", b_ih: None, b_hh: None };
    let y = rnn_layer(&mut b, "rnn", xi, &p, &consts, &arch).unwrap();
    b.mark_output("Y", y);
    let g = b.finish();
    for e in [ElemType::F32, ElemType::Bf16] {
        let s = ctx(e, &lut).store;
        let wr = RnnWeights { w_ih: wt.w_ih.map(|v| s.apply(v)), w_hh: wt.w_hh.map(|v| s.apply(v)), b_ih: None, b_hh: None };
        let r = rnn_ref(&x.map(|v| s.apply(v)), &p, &wr, None, ctx(e, &lut)).unwrap();
        let err = rel_l2(&r.data, &want);
        assert!(err <= tol(e), "{e:?}: {err:e}");
        let y = run(&g, &[("X", &x)], e);
        assert_eq!(y.data.len(), h_n);
        assert_eq!(y.data, r.data[(p.seq_len - 1) * h_n..]);
    }
}

pub fn bf16_rounding_matches_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10_000 {
        let x = f32::from_bits(rng.gen::<u32>());
        if x.is_nan() {
            continue;
        }
        assert_eq!(to_bf16(x).to_bits(), half::bf16::from_f32(x).to_f32().to_bits());
    }
}

pub fn silu_lut_matches_independent_interpolation() {
    let lut = SiluLut::default();
    for i in -1000..=1000 {
        let x = i as f32 * 0.0123;
        let got = lut.silu(x) as f64;
        let want = silu64(x as f64);
        assert!((got - want).abs() <= 1e-5 * want.abs().max(1.0), "{x}: {got} vs {want}");
    }
}
