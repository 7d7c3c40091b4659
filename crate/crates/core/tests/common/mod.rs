//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use ogreg_core::gaze::{self, MdConvConfig, Pattern};
use ogreg_core::glance::{self, SodaConfig};
use ogreg_core::numerics::params::Init;
use ogreg_core::{Graph, ParamSet, Rng, Tensor};

/// `[m,k] × [k,n]` by the textbook triple loop.
pub fn matmul_ref(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Grouped channels-last 3D cross-correlation with zero padding.
pub fn conv3d_ref(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: Option<&[f64]>,
    stride: [usize; 3],
    pad: [usize; 3],
    groups: usize,
) -> Tensor<f64> {
    let [b, t, h, wd, cin] = <[usize; 5]>::try_from(x.dims()).unwrap();
    let [kd, kh, kw, cin_g, cout] = <[usize; 5]>::try_from(w.dims()).unwrap();
    assert_eq!(cin_g * groups, cin);
    let cout_g = cout / groups;
    let ext = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
    let (ot, oh, ow) = (
        ext(t, kd, stride[0], pad[0]),
        ext(h, kh, stride[1], pad[1]),
        ext(wd, kw, stride[2], pad[2]),
    );
    let mut out = vec![0.0; b * ot * oh * ow * cout];
    let mut idx = 0;
    for bi in 0..b {
        for z in 0..ot {
            for y in 0..oh {
                for xo in 0..ow {
                    for o in 0..cout {
                        let grp = o / cout_g;
                        let mut acc = bias.map_or(0.0, |bb| bb[o]);
                        for dz in 0..kd {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let zi = (z * stride[0] + dz) as isize - pad[0] as isize;
                                    let yi = (y * stride[1] + dy) as isize - pad[1] as isize;
                                    let xi = (xo * stride[2] + dx) as isize - pad[2] as isize;
                                    if zi < 0
                                        || yi < 0
                                        || xi < 0
                                        || zi >= t as isize
                                        || yi >= h as isize
                                        || xi >= wd as isize
                                    {
                                        continue;
                                    }
                                    for ci in 0..cin_g {
                                        let xv = x.at(&[
                                            bi,
                                            zi as usize,
                                            yi as usize,
                                            xi as usize,
                                            grp * cin_g + ci,
                                        ]);
                                        acc += xv * w.at(&[dz, dy, dx, ci, o]);
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, ot, oh, ow, cout], out).unwrap()
}

/// Row softmax via `exp(x − max) / Σ exp(x − max)`.
pub fn softmax_ref(x: &[f64], n: usize) -> Vec<f64> {
    x.chunks(n)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

/// Layer norm over rows of length `n` from the mean/variance definition.
pub fn layer_norm_ref(x: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Vec<f64> {
    let n = gain.len();
    x.chunks(n)
        .flat_map(|row| {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(move |(j, v)| (v - mean) * r * gain[j] + shift[j])
                .collect::<Vec<_>>()
        })
        .collect()
}

fn affine(
    x: &[f64],
    n: usize,
    c_in: usize,
    w: &[f64],
    b: Option<&[f64]>,
    c_out: usize,
) -> Vec<f64> {
    let mut y = matmul_ref(x, w, n, c_in, c_out);
    if let Some(b) = b {
        for row in y.chunks_mut(c_out) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Full-token multi-head self-attention plus the value residual, from the
/// textbook formula: `softmax(QKᵀ/√d)V W_O + b_O + V` over `n` tokens.
pub struct MsaWeights<'a> {
    pub wq: &'a [f64],
    pub bq: Option<&'a [f64]>,
    pub wk: &'a [f64],
    pub bk: Option<&'a [f64]>,
    pub wv: &'a [f64],
    pub bv: Option<&'a [f64]>,
    pub wo: &'a [f64],
    pub bo: Option<&'a [f64]>,
}

pub fn msa_ref(x: &[f64], n: usize, c: usize, heads: usize, w: &MsaWeights<'_>) -> Vec<f64> {
    let d = c / heads;
    let q = affine(x, n, c, w.wq, w.bq, c);
    let k = affine(x, n, c, w.wk, w.bk, c);
    let v = affine(x, n, c, w.wv, w.bv, c);
    let mut z = vec![0.0; n * c];
    for hd in 0..heads {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut s = 0.0;
                for e in 0..d {
                    s += q[i * c + hd * d + e] * k[j * c + hd * d + e];
                }
                *l = s / (d as f64).sqrt();
            }
            let a = softmax_ref(&logits, n);
            for e in 0..d {
                let mut s = 0.0;
                for (j, aj) in a.iter().enumerate() {
                    s += aj * v[j * c + hd * d + e];
                }
                z[i * c + hd * d + e] = s;
            }
        }
    }
    let mut out = affine(&z, n, c, w.wo, w.bo, c);
    for (o, vv) in out.iter_mut().zip(&v) {
        *o += vv;
    }
    out
}

/// `A′[t,t′] = (1/(h·P)) Σ_heads Σ_{q∈t} Σ_{k∈t′} A[q,k]` with `P` tokens per frame.
pub fn a_prime_ref(attn: &Tensor<f64>, frames: usize) -> Vec<f64> {
    let [b, heads, n, _] = <[usize; 4]>::try_from(attn.dims()).unwrap();
    let p = n / frames;
    let mut out = vec![0.0; b * frames * frames];
    for bi in 0..b {
        for t in 0..frames {
            for u in 0..frames {
                let mut s = 0.0;
                for hd in 0..heads {
                    for qi in 0..p {
                        for ki in 0..p {
                            s += attn.at(&[bi, hd, t * p + qi, u * p + ki]);
                        }
                    }
                }
                out[(bi * frames + t) * frames + u] = s / (heads * p) as f64;
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Replaces all-zero tensors (biases, shifts) with small random values.
pub fn randomize_zeros(ps: &ParamSet<f64>, rng: &mut Rng) -> ParamSet<f64> {
    let mut out = ParamSet::new();
    for (name, t) in ps.iter() {
        let t = if t.elems().iter().all(|&v| v == 0.0) {
            rng.normal_tensor(t.dims(), 0.3).unwrap()
        } else {
            t.clone()
        };
        out.insert(name, t).unwrap();
    }
    out
}

pub fn soda_params(cfg: &SodaConfig, seed: u64) -> ParamSet<f64> {
    let mut rng = Rng::new(seed);
    let mut ps = ParamSet::new();
    glance::init_soda(&mut Init::new(&mut ps, &mut rng), cfg).unwrap();
    randomize_zeros(&ps, &mut rng)
}

pub fn mdconv_params(seed: u64) -> (MdConvConfig, ParamSet<f64>) {
    let cfg = MdConvConfig::new(8, 4);
    let mut rng = Rng::new(seed);
    let mut ps = ParamSet::new();
    gaze::init_mdconv(&mut Init::new(&mut ps, &mut rng), &cfg).unwrap();
    (cfg, randomize_zeros(&ps, &mut rng))
}

pub fn mdconv_with(
    pattern: Pattern,
    cfg: &MdConvConfig,
    ps: &ParamSet<f64>,
    z: &Tensor<f64>,
) -> Tensor<f64> {
    let cfg = MdConvConfig { pattern, ..*cfg };
    let mut g = Graph::new();
    let b = g.bind_frozen(ps);
    let zv = g.constant(z.clone());
    let out = gaze::mdconv_forward(&mut g, &b.scope(""), &cfg, zv, None).unwrap();
    g.value(out.y).clone()
}

pub fn mdconv_at_pi(
    cfg: &MdConvConfig,
    ps: &ParamSet<f64>,
    z: &Tensor<f64>,
    pi2d: f64,
) -> Tensor<f64> {
    let mut g = Graph::new();
    let b = g.bind_frozen(ps);
    let s = b.scope("");
    let zv = g.constant(z.clone());
    let zt = g.linear(zv, s.get("w_in").unwrap(), None).unwrap();
    let bs = z.dims()[0];
    let pi = Tensor::from_fn([bs, 2], |i| if i % 2 == 0 { pi2d } else { 1.0 - pi2d }).unwrap();
    let pi = g.constant(pi);
    let y = gaze::mixed_conv(&mut g, &s, cfg, zt, pi).unwrap();
    g.value(y).clone()
}
