//! Plain nested-loop re-implementation of the model, reading weights by name.

use bootmae::model::{ModelConfig, Tap};
use bootmae::params::ParamSet;
use bootmae::tensor::Tensor;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor<f64>) -> Mat {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

pub struct Oracle<'a> {
    pub p: &'a ParamSet<f64>,
    pub cfg: &'a ModelConfig,
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// 2-D sin-cos table: first half encodes the row, second half the column.
pub fn sincos(gh: usize, gw: usize, dim: usize) -> Mat {
    let half = dim / 2;
    let quarter = half / 2;
    let enc = |pos: f64| -> Vec<f64> {
        let w: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
        let mut v: Vec<f64> = w.iter().map(|w| (pos * w).sin()).collect();
        v.extend(w.iter().map(|w| (pos * w).cos()));
        v
    };
    let mut out = Vec::new();
    for r in 0..gh {
        for c in 0..gw {
            let mut v = enc(r as f64);
            v.extend(enc(c as f64));
            out.push(v);
        }
    }
    out
}

impl Oracle<'_> {
    fn t(&self, name: &str) -> &Tensor<f64> {
        self.p.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn has(&self, name: &str) -> bool {
        self.p.contains(name)
    }

    pub fn linear(&self, x: &Mat, prefix: &str) -> Mat {
        let w = self.t(&format!("{prefix}.w"));
        let (k, n) = (w.shape()[0], w.shape()[1]);
        let b = format!("{prefix}.b");
        x.iter()
            .map(|row| {
                (0..n)
                    .map(|j| {
                        let mut s: f64 = (0..k).map(|i| row[i] * w.data()[i * n + j]).sum();
                        if self.has(&b) {
                            s += self.t(&b).data()[j];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    pub fn layer_norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.t(&format!("{prefix}.gain")).data();
        let b = self.t(&format!("{prefix}.bias")).data();
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    /// Scaled dot-product attention of `q` rows over `k`/`v` rows, per head.
    fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
        let d = q[0].len();
        let dh = d / heads;
        let dv = v[0].len() / heads;
        q.iter()
            .map(|qi| {
                let mut out = vec![0.0; v[0].len()];
                for h in 0..heads {
                    let scores: Vec<f64> = k
                        .iter()
                        .map(|kj| (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let a = softmax(&scores);
                    for (j, vj) in v.iter().enumerate() {
                        for c in 0..dv {
                            out[h * dv + c] += a[j] * vj[h * dv + c];
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub fn block(&self, x: &Mat, prefix: &str, heads: usize, inject: Option<&Mat>) -> Mat {
        let h = self.layer_norm(x, &format!("{prefix}.norm1"));
        let q = self.linear(&h, &format!("{prefix}.attn.q"));
        let k = self.linear(&h, &format!("{prefix}.attn.k"));
        let v = self.linear(&h, &format!("{prefix}.attn.v"));
        let ctx = Self::attend(&q, &k, &v, heads);
        let mut x = add(x, &self.linear(&ctx, &format!("{prefix}.attn.out")));
        if let Some(f) = inject {
            // queries from the decoder stream, keys and values from the injected feature
            let xa = format!("{prefix}.xattn");
            let qin = if self.has(&format!("{xa}.norm.gain")) {
                self.layer_norm(&x, &format!("{xa}.norm"))
            } else {
                x.clone()
            };
            let q = self.linear(&qin, &format!("{xa}.q"));
            let k = self.linear(f, &format!("{xa}.k"));
            let v = self.linear(f, &format!("{xa}.v"));
            let mut ctx = Self::attend(&q, &k, &v, 1);
            if self.has(&format!("{xa}.out.w")) {
                ctx = self.linear(&ctx, &format!("{xa}.out"));
            }
            x = add(&x, &ctx);
        }
        let h = self.layer_norm(&x, &format!("{prefix}.norm2"));
        let h: Mat = self
            .linear(&h, &format!("{prefix}.mlp.fc1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        add(&x, &self.linear(&h, &format!("{prefix}.mlp.fc2")))
    }

    /// Returns (normalized output, per-block outputs).
    pub fn encode(&self, patches: &Mat, indices: &[usize]) -> (Mat, Vec<Mat>) {
        let gh = self.cfg.image_h / self.cfg.patch;
        let gw = self.cfg.image_w / self.cfg.patch;
        let pos = sincos(gh, gw, self.cfg.enc_dim);
        let sel: Mat = indices.iter().map(|&i| pos[i].clone()).collect();
        let mut x = add(&self.linear(patches, "enc.patch_embed"), &sel);
        let mut taps = Vec::new();
        for i in 0..self.cfg.enc_depth {
            x = self.block(&x, &format!("enc.blocks.{i}"), self.cfg.enc_heads, None);
            taps.push(x.clone());
        }
        (self.layer_norm(&x, "enc.norm"), taps)
    }

    fn tap<'m>(&self, tap: Option<Tap>, z_hat: &'m Mat, taps: &'m [Mat]) -> Option<&'m Mat> {
        let depth = self.cfg.enc_depth;
        tap.map(|t| {
            let i = match t {
                Tap::Low => 0,
                Tap::Mid => (depth / 2).max(1) - 1,
                Tap::High => depth - 1,
            };
            if self.cfg.normed_high_tap && i == depth - 1 {
                z_hat
            } else {
                &taps[i]
            }
        })
    }

    fn decode(&self, prefix: &str, visible: &Mat, masked: &[usize], heads: usize, depth: usize, inject: Option<&Mat>) -> Mat {
        let n = visible.len() + masked.len();
        let dim = visible[0].len();
        let gh = self.cfg.image_h / self.cfg.patch;
        let gw = self.cfg.image_w / self.cfg.patch;
        let pos = sincos(gh, gw, dim);
        let token = self.t(&format!("{prefix}.mask_token")).data().to_vec();
        let mut vis = visible.iter();
        let mut x: Mat = (0..n)
            .map(|i| {
                let base = if masked.contains(&i) { token.clone() } else { vis.next().unwrap().clone() };
                base.iter().zip(&pos[i]).map(|(a, b)| a + b).collect()
            })
            .collect();
        for i in 0..depth {
            x = self.block(&x, &format!("{prefix}.blocks.{i}"), heads, inject);
        }
        self.layer_norm(&x, &format!("{prefix}.norm"))
    }

    /// (z_hat, x_bar, f_bar) for an image already split into patch rows.
    pub fn forward(&self, patches: &Mat, masked: &[usize]) -> (Mat, Mat, Mat) {
        let visible: Vec<usize> = (0..patches.len()).filter(|i| !masked.contains(i)).collect();
        let vp: Mat = visible.iter().map(|&i| patches[i].clone()).collect();
        let (z_hat, taps) = self.encode(&vp, &visible);
        let c = self.cfg;

        let reg_in = self.linear(&z_hat, "reg.in_proj");
        let r = self.decode("reg", &reg_in, masked, c.reg_heads, c.reg_depth, self.tap(c.reg_tap, &z_hat, &taps));
        let x_bar = self.linear(&r, "reg.head");

        let p = self.decode("pred", &z_hat, masked, c.pred_heads, c.pred_depth, self.tap(c.pred_tap, &z_hat, &taps));
        let h: Mat = self
            .linear(&p, "pred.head.fc1")
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f_bar = self.linear(&h, "pred.head.fc2");
        (z_hat, x_bar, f_bar)
    }
}
