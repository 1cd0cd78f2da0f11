//! Toy pre-LN transformer with pluggable attention.
//!
//! Blocks are stored in reverse time: `blocks[0]` is step `t = T`, the last
//! block produces `X_0`.

pub mod attention;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitRng;
use crate::tensor::linalg::Matrix;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

pub use attention::{kep_fuse, kep_posterior, kernel_attention_forward, mhsa_forward, sgpa_posterior, KepBranch};
pub use train::{train_backbone, TrainConfig, TrainReport};

pub const LN_EPS: f64 = 1e-5;
pub const SGPA_JITTER: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Standard,
    Kernel,
    Sgpa,
    Kep,
}

impl AttentionMode {
    pub const ALL: [AttentionMode; 4] = [Self::Standard, Self::Kernel, Self::Sgpa, Self::Kep];

    pub fn is_gp(self) -> bool {
        matches!(self, Self::Sgpa | Self::Kep)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Kernel => "kernel",
            Self::Sgpa => "sgpa",
            Self::Kep => "kep",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Add,
    Cat,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    pub n_heads: usize,
    pub d_model: usize,
    /// KEP truncation rank.
    pub s: usize,
    pub fusion: Fusion,
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// How raw feature rows become tokens. A learned class token is always
/// prepended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputSpec {
    /// `side x side` single-channel grid cut into `patch x patch` tokens.
    Grid { side: usize, patch: usize },
    /// Integer token ids in `[0, vocab)`, fixed length.
    Tokens { vocab: usize, len: usize },
    /// One token per scalar feature.
    Tabular { features: usize },
}

impl InputSpec {
    pub fn n_tokens(&self) -> usize {
        1 + match *self {
            InputSpec::Grid { side, patch } => (side / patch) * (side / patch),
            InputSpec::Tokens { len, .. } => len,
            InputSpec::Tabular { features } => features,
        }
    }

    pub fn width(&self) -> usize {
        match *self {
            InputSpec::Grid { side, .. } => side * side,
            InputSpec::Tokens { len, .. } => len,
            InputSpec::Tabular { features } => features,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub attention: AttentionConfig,
    /// Number of blocks `T`.
    pub depth: usize,
    pub mlp_hidden: usize,
    pub n_classes: usize,
    pub input: InputSpec,
    /// Reparameterized samples averaged per evaluation forward in GP modes.
    pub eval_samples: usize,
}

impl BackboneConfig {
    pub fn n_tokens(&self) -> usize {
        self.input.n_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.attention;
        if a.n_heads == 0 || a.d_model % a.n_heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} not divisible by n_heads {}",
                a.d_model, a.n_heads
            )));
        }
        if a.mode == AttentionMode::Kep && (a.s == 0 || a.s > self.n_tokens()) {
            return Err(Error::Range {
                what: "KEP rank s",
                value: a.s as i64,
                lo: 1,
                hi: self.n_tokens() as i64,
            });
        }
        if let InputSpec::Grid { side, patch } = self.input {
            if patch == 0 || side % patch != 0 {
                return Err(Error::contract("grid side must be a multiple of the patch size"));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::contract("need at least two classes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Fuse {
    Add { w: ParamId },
    Cat { w1: ParamId, w2: ParamId },
}

#[derive(Clone, Debug)]
pub enum HeadIds {
    Standard { wq: ParamId, wk: ParamId, wv: ParamId },
    Kernel { wqk: ParamId, wv: ParamId },
    /// `sfac[i]` is the `N x N` factor of the variational covariance `S_i`.
    Sgpa { wqk: ParamId, wv: ParamId, sfac: ParamId },
    Kep {
        we: ParamId,
        be: ParamId,
        wr: ParamId,
        br: ParamId,
        /// Pre-softplus singular values.
        lam: ParamId,
        mu: ParamId,
        /// `[s, s, s]`; slice `i` is the factor of `S_uu[i]`.
        sfac: ParamId,
        fuse: Fuse,
    },
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub heads: Vec<HeadIds>,
    /// `[n·d_h, d]`; the attention output is `concat(F_h) · o`.
    pub o: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub enum EmbedIds {
    Grid { w: ParamId, b: ParamId },
    Tokens { table: ParamId },
    Tabular { w: ParamId, b: ParamId },
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub embed: EmbedIds,
    pub pos: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<BlockIds>,
    pub head_ln: (ParamId, ParamId),
    pub head_w: ParamId,
    pub head_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

/// One factor term of a path transition: noise contributes `A ε vᵀ` to the
/// `[N, d]` state with `ε ~ N(0, I_r)`, `A` is `N x r`.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub a: Matrix,
    pub v: Vec<f64>,
}

pub enum Noise<'a> {
    Off,
    On(&'a mut SplitRng),
}

impl Noise<'_> {
    pub fn is_on(&self) -> bool {
        matches!(self, Noise::On(_))
    }
}

pub struct GraphForward {
    pub logits: Var,
    pub x0: Var,
    /// `X_T` followed by `(Z_t, X_{t-1})` for `t = T..1`.
    pub x_t: Var,
    pub z: Vec<Var>,
    pub xs: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub x0: Tensor,
    pub x_t: Tensor,
    /// Per block in time order `t = T..1`: `(Z_t, X_{t-1})`.
    pub traces: Vec<(Tensor, Tensor)>,
}

fn fan_in(std_scale: f64, fan: usize) -> f64 {
    std_scale / (fan as f64).sqrt()
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SplitRng::with_stream(seed, 0xB0);
        let mut ps = ParamStore::new();
        let a = cfg.attention;
        let (d, dh, n_tok) = (a.d_model, a.d_head(), cfg.n_tokens());
        let embed = match cfg.input {
            InputSpec::Grid { patch, .. } => {
                let p2 = patch * patch;
                EmbedIds::Grid {
                    w: ps.add("embed.w", Tensor::randn(&[p2, d], fan_in(1.0, p2), &mut rng)),
                    b: ps.add("embed.b", Tensor::zeros(&[d])),
                }
            }
            InputSpec::Tokens { vocab, .. } => EmbedIds::Tokens {
                table: ps.add("embed.table", Tensor::randn(&[vocab, d], 1.0, &mut rng)),
            },
            InputSpec::Tabular { features } => EmbedIds::Tabular {
                w: ps.add("embed.w", Tensor::randn(&[features, d], 1.0, &mut rng)),
                b: ps.add("embed.b", Tensor::randn(&[features, d], 0.1, &mut rng)),
            },
        };
        let pos = ps.add("embed.pos", Tensor::randn(&[n_tok - 1, d], 0.1, &mut rng));
        let cls = ps.add("embed.cls", Tensor::randn(&[1, d], 0.1, &mut rng));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for k in 0..cfg.depth {
            let p = |s: &str| format!("blocks.{k}.{s}");
            let ln1 = (
                ps.add(p("ln1.g"), Tensor::filled(&[d], 1.0)),
                ps.add(p("ln1.b"), Tensor::zeros(&[d])),
            );
            let mut heads = Vec::with_capacity(a.n_heads);
            for h in 0..a.n_heads {
                let q = |s: &str| format!("blocks.{k}.attn.h{h}.{s}");
                let w = |rng: &mut SplitRng| Tensor::randn(&[d, dh], fan_in(1.0, d), rng);
                heads.push(match a.mode {
                    AttentionMode::Standard => HeadIds::Standard {
                        wq: ps.add(q("wq"), w(&mut rng)),
                        wk: ps.add(q("wk"), w(&mut rng)),
                        wv: ps.add(q("wv"), w(&mut rng)),
                    },
                    AttentionMode::Kernel => HeadIds::Kernel {
                        wqk: ps.add(q("wqk"), Tensor::randn(&[d, dh], fan_in(0.5, d), &mut rng)),
                        wv: ps.add(q("wv"), Tensor::randn(&[d, dh], fan_in(1.0, d) / n_tok as f64, &mut rng)),
                    },
                    AttentionMode::Sgpa => {
                        let mut sf = Tensor::zeros(&[dh, n_tok, n_tok]);
                        for i in 0..dh {
                            for n in 0..n_tok {
                                sf.data_mut()[(i * n_tok + n) * n_tok + n] = 0.1;
                            }
                        }
                        HeadIds::Sgpa {
                            wqk: ps.add(q("wqk"), Tensor::randn(&[d, dh], fan_in(0.5, d), &mut rng)),
                            wv: ps.add(q("wv"), Tensor::randn(&[d, dh], fan_in(1.0, d) / n_tok as f64, &mut rng)),
                            sfac: ps.add(q("sfac"), sf),
                        }
                    }
                    AttentionMode::Kep => {
                        let s = a.s;
                        let mut sf = Tensor::zeros(&[s, s, s]);
                        for i in 0..s {
                            for m in 0..s {
                                sf.data_mut()[(i * s + m) * s + m] = 0.1;
                            }
                        }
                        let we = ps.add(q("we"), Tensor::randn(&[d, s], fan_in(1.0, d), &mut rng));
                        let be = ps.add(q("be"), Tensor::zeros(&[s]));
                        let wr = ps.add(q("wr"), Tensor::randn(&[d, s], fan_in(1.0, d), &mut rng));
                        let br = ps.add(q("br"), Tensor::zeros(&[s]));
                        // softplus(0.5413) = 1
                        let lam = ps.add(q("lam"), Tensor::filled(&[s], 0.541_324_854_612_918_1));
                        let mu = ps.add(q("mu"), Tensor::randn(&[s, s], fan_in(1.0, s), &mut rng));
                        let sfac = ps.add(q("sfac"), sf);
                        let fuse = match a.fusion {
                            Fusion::Add => Fuse::Add {
                                w: ps.add(q("w_add"), Tensor::randn(&[s, dh], fan_in(1.0, s), &mut rng)),
                            },
                            Fusion::Cat => Fuse::Cat {
                                w1: ps.add(q("w_cat1"), Tensor::randn(&[n_tok, 2 * n_tok], fan_in(1.0, 2 * n_tok), &mut rng)),
                                w2: ps.add(q("w_cat2"), Tensor::randn(&[s, dh], fan_in(1.0, s), &mut rng)),
                            },
                        };
                        HeadIds::Kep {
                            we,
                            be,
                            wr,
                            br,
                            lam,
                            mu,
                            sfac,
                            fuse,
                        }
                    }
                });
            }
            let o = ps.add(p("attn.o"), Tensor::randn(&[a.n_heads * dh, d], fan_in(1.0, d), &mut rng));
            let ln2 = (
                ps.add(p("ln2.g"), Tensor::filled(&[d], 1.0)),
                ps.add(p("ln2.b"), Tensor::zeros(&[d])),
            );
            let w1 = ps.add(p("mlp.w1"), Tensor::randn(&[d, cfg.mlp_hidden], fan_in(1.0, d), &mut rng));
            let b1 = ps.add(p("mlp.b1"), Tensor::zeros(&[cfg.mlp_hidden]));
            let w2 = ps.add(p("mlp.w2"), Tensor::randn(&[cfg.mlp_hidden, d], fan_in(1.0, cfg.mlp_hidden), &mut rng));
            let b2 = ps.add(p("mlp.b2"), Tensor::zeros(&[d]));
            blocks.push(BlockIds {
                ln1,
                ln2,
                heads,
                o,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let head_ln = (
            ps.add("head.ln.g", Tensor::filled(&[d], 1.0)),
            ps.add("head.ln.b", Tensor::zeros(&[d])),
        );
        let head_w = ps.add("head.w", Tensor::randn(&[d, cfg.n_classes], fan_in(1.0, d), &mut rng));
        let head_b = ps.add("head.b", Tensor::zeros(&[cfg.n_classes]));
        Ok(Backbone {
            cfg,
            params: ps,
            layout: Layout {
                embed,
                pos,
                cls,
                blocks,
                head_ln,
                head_w,
                head_b,
            },
        })
    }

    pub fn depth(&self) -> usize {
        self.cfg.depth
    }

    pub fn n_tokens(&self) -> usize {
        self.cfg.n_tokens()
    }

    pub fn d_model(&self) -> usize {
        self.cfg.attention.d_model
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Index into `blocks` of time step `t` in `1..=T`.
    pub fn block_index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.cfg.depth {
            return Err(Error::Range {
                what: "timestep",
                value: t as i64,
                lo: 1,
                hi: self.cfg.depth as i64,
            });
        }
        Ok(self.cfg.depth - t)
    }

    /// `X_T = embed(X)` on the graph, `[B, N, d]`.
    pub fn embed_graph(&self, g: &mut Graph, p: &[Var], x: &Tensor) -> Result<Var> {
        let width = self.cfg.input.width();
        if x.shape().len() != 2 || x.shape()[1] != width {
            return Err(Error::shape("embed", x.shape(), &[usize::MAX, width]));
        }
        let b = x.shape()[0];
        let d = self.d_model();
        let l = &self.layout;
        let tokens = match (&l.embed, self.cfg.input) {
            (EmbedIds::Grid { w, b: bias }, InputSpec::Grid { side, patch }) => {
                let pp = patchify(x.data(), b, side, patch);
                let np = (side / patch) * (side / patch);
                let xin = g.constant(&[b, np, patch * patch], pp);
                let y = g.matmul(xin, p[w.0])?;
                g.add(y, p[bias.0])?
            }
            (EmbedIds::Tokens { table }, InputSpec::Tokens { vocab, len }) => {
                let mut idx = Vec::with_capacity(b * len);
                for &v in x.data() {
                    if v < 0.0 || v.fract() != 0.0 || v as usize >= vocab {
                        return Err(Error::Range {
                            what: "token id",
                            value: v as i64,
                            lo: 0,
                            hi: vocab as i64 - 1,
                        });
                    }
                    idx.push(v as usize);
                }
                let e = g.gather(p[table.0], &idx)?;
                g.reshape(e, &[b, len, d])?
            }
            (EmbedIds::Tabular { w, b: bias }, InputSpec::Tabular { features }) => {
                let xin = g.constant(&[b, features, 1], x.data().to_vec());
                let y = g.mul(xin, p[w.0])?;
                g.add(y, p[bias.0])?
            }
            _ => return Err(Error::contract("embedding layout does not match input spec")),
        };
        let tokens = g.add(tokens, p[l.pos.0])?;
        let zeros = g.constant(&[b, 1, d], vec![0.0; b * d]);
        let cls = g.add(zeros, p[l.cls.0])?;
        g.concat(&[cls, tokens], 1)
    }

    /// `MLP(LN(x)) + x` of block `k`.
    pub fn mlp_residual(&self, g: &mut Graph, p: &[Var], k: usize, x: Var) -> Result<Var> {
        let bl = &self.layout.blocks[k];
        let h = g.layer_norm(x, Some(p[bl.ln2.0 .0]), Some(p[bl.ln2.1 .0]), LN_EPS)?;
        let h = g.matmul(h, p[bl.w1.0])?;
        let h = g.add(h, p[bl.b1.0])?;
        let h = g.gelu(h)?;
        let h = g.matmul(h, p[bl.w2.0])?;
        let h = g.add(h, p[bl.b2.0])?;
        g.add(h, x)
    }

    /// Solution head on `X_0`: LN, mean over tokens, affine to logits.
    pub fn head_graph(&self, g: &mut Graph, p: &[Var], x0: Var) -> Result<Var> {
        let l = &self.layout;
        let h = g.layer_norm(x0, Some(p[l.head_ln.0 .0]), Some(p[l.head_ln.1 .0]), LN_EPS)?;
        let h = g.mean_axis(h, 1)?;
        let h = g.matmul(h, p[l.head_w.0])?;
        g.add(h, p[l.head_b.0])
    }

    /// Full pre-LN forward: `Z_t = MHSA(LN(X_t)) + X_t`,
    /// `X_{t-1} = MLP(LN(Z_t)) + Z_t`.
    pub fn forward_graph(&self, g: &mut Graph, p: &[Var], x: &Tensor, mut noise: Noise<'_>) -> Result<GraphForward> {
        let x_t = self.embed_graph(g, p, x)?;
        let mut cur = x_t;
        let mut z = Vec::with_capacity(self.depth());
        let mut xs = Vec::with_capacity(self.depth());
        for k in 0..self.depth() {
            let attn = self.attention_graph(g, p, k, cur, &mut noise, false)?;
            let zt = g.add(attn.sample.unwrap_or(attn.mean), cur)?;
            let xn = self.mlp_residual(g, p, k, zt)?;
            z.push(zt);
            xs.push(xn);
            cur = xn;
        }
        let logits = self.head_graph(g, p, cur)?;
        Ok(GraphForward {
            logits,
            x0: cur,
            x_t,
            z,
            xs,
        })
    }

    pub fn forward(&self, x: &Tensor, noise: Noise<'_>) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let f = self.forward_graph(&mut g, &p, x, noise)?;
        Ok(ForwardOutput {
            logits: g.to_tensor(f.logits),
            x0: g.to_tensor(f.x0),
            x_t: g.to_tensor(f.x_t),
            traces: f
                .z
                .iter()
                .zip(&f.xs)
                .map(|(&a, &b)| (g.to_tensor(a), g.to_tensor(b)))
                .collect(),
        })
    }

    /// Class probabilities; GP modes with noise average `eval_samples`
    /// softmax draws.
    pub fn predict_proba(&self, x: &Tensor, n_draws: usize, noise: Option<&mut SplitRng>) -> Result<Tensor> {
        match noise {
            Some(rng) if self.cfg.attention.mode.is_gp() => {
                let mut acc: Option<Vec<f64>> = None;
                let mut shape = vec![];
                for _ in 0..n_draws.max(1) {
                    let out = self.forward(x, Noise::On(rng))?;
                    let pr = crate::tensor::softmax(&out.logits)?;
                    shape = pr.shape().to_vec();
                    match &mut acc {
                        Some(a) => a.iter_mut().zip(pr.data()).for_each(|(a, b)| *a += b),
                        None => acc = Some(pr.into_data()),
                    }
                }
                let k = n_draws.max(1) as f64;
                Tensor::new(&shape, acc.unwrap().into_iter().map(|v| v / k).collect())
            }
            _ => {
                let out = self.forward(x, Noise::Off)?;
                crate::tensor::softmax(&out.logits)
            }
        }
    }

    pub fn checkpoint(&self, seed: u64, config_hash: &str) -> Result<crate::tensor::checkpoint::Checkpoint> {
        Ok(crate::tensor::checkpoint::Checkpoint::from_store(
            "backbone",
            seed,
            config_hash,
            serde_json::to_value(self.cfg)?,
            &self.params,
        ))
    }

    pub fn from_checkpoint(ck: &crate::tensor::checkpoint::Checkpoint) -> Result<Self> {
        if ck.header.section != "backbone" {
            return Err(Error::contract(format!("expected a backbone checkpoint, got `{}`", ck.header.section)));
        }
        let cfg: BackboneConfig = serde_json::from_value(ck.header.meta.clone())?;
        let mut bb = Backbone::new(cfg, 0)?;
        ck.restore_into(&mut bb.params)?;
        Ok(bb)
    }

    /// SHA-256 of the little-endian parameter payload.
    pub fn checksum(&self) -> String {
        crate::tensor::checkpoint::Checkpoint::from_store("backbone", 0, "", serde_json::Value::Null, &self.params)
            .payload_sha256()
    }
}

/// Row-major `[B, side²]` grids to `[B, n_patches, patch²]`, patches in
/// row-major order, pixels row-major within a patch.
pub fn patchify(x: &[f64], b: usize, side: usize, patch: usize) -> Vec<f64> {
    let per = side / patch;
    let mut out = Vec::with_capacity(x.len());
    for bi in 0..b {
        let img = &x[bi * side * side..(bi + 1) * side * side];
        for pr in 0..per {
            for pc in 0..per {
                for r in 0..patch {
                    for c in 0..patch {
                        out.push(img[(pr * patch + r) * side + pc * patch + c]);
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn cfg(mode: AttentionMode, depth: usize) -> BackboneConfig {
        BackboneConfig {
            attention: AttentionConfig {
                mode,
                n_heads: 2,
                d_model: 8,
                s: 3,
                fusion: Fusion::Add,
            },
            depth,
            mlp_hidden: 16,
            n_classes: 3,
            input: InputSpec::Grid { side: 4, patch: 2 },
            eval_samples: 1,
        }
    }

    fn inputs(b: usize, seed: u64) -> Tensor {
        let mut r = SplitRng::new(seed);
        Tensor::randn(&[b, 16], 1.0, &mut r)
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let p = patchify(&x, 1, 4, 2);
        assert_eq!(&p[..8], &[0.0, 1.0, 4.0, 5.0, 2.0, 3.0, 6.0, 7.0]);
    }

    #[test]
    fn zero_depth_is_head_of_embedding() {
        let bb = Backbone::new(cfg(AttentionMode::Standard, 0), 1).unwrap();
        let x = inputs(3, 2);
        let out = bb.forward(&x, Noise::Off).unwrap();
        let mut g = Graph::new();
        let p = bb.params.bind_frozen(&mut g);
        let e = bb.embed_graph(&mut g, &p, &x).unwrap();
        let h = bb.head_graph(&mut g, &p, e).unwrap();
        assert_eq!(out.logits.data(), g.value(h));
        assert!(out.traces.is_empty());
    }

    #[test]
    fn noise_off_is_deterministic_for_every_mode() {
        for mode in AttentionMode::ALL {
            let bb = Backbone::new(cfg(mode, 2), 3).unwrap();
            let x = inputs(2, 4);
            let a = bb.forward(&x, Noise::Off).unwrap();
            let b = bb.forward(&x, Noise::Off).unwrap();
            assert_eq!(a.logits, b.logits, "{mode:?}");
            assert!(a.logits.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn block_index_rejects_out_of_range() {
        let bb = Backbone::new(cfg(AttentionMode::Standard, 3), 1).unwrap();
        assert_eq!(bb.block_index(3).unwrap(), 0);
        assert_eq!(bb.block_index(1).unwrap(), 2);
        assert!(bb.block_index(0).is_err());
        assert!(bb.block_index(4).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_restores_model() {
        let bb = Backbone::new(cfg(AttentionMode::Kep, 2), 5).unwrap();
        let ck = bb.checkpoint(5, "h").unwrap();
        let back = Backbone::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.params.flat(), bb.params.flat());
        assert_eq!(back.cfg, bb.cfg);
    }

    use crate::tensor::checkpoint::Checkpoint;
}
