//! Straight-line reference computations for the fusion blocks, written with
//! plain loops and compared against the taped forward passes.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shared_ris::autodiff::Tape;
use shared_ris::config::{toy_config, SlotVariant, ValidatedConfig};
use shared_ris::decoder::SharedMaskDecoder;
use shared_ris::embedding::{concat_modalities, layout_for};
use shared_ris::fpn::SharedFpn;
use shared_ris::fusion::Fusion;
use shared_ris::params::{AttentionSite, BufferStore, Ctx, Mode, ParamBuilder, ParamStore};

type Mat = Vec<Vec<f64>>;

const TOL: f64 = 1e-6;

fn random_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

/// Every parameter, LN gains included, drawn uniformly so no term vanishes.
fn random_params(pb: ParamBuilder, seed: u64) -> (ParamStore<f64>, BufferStore<f64>) {
    let (specs, bufs) = pb.finish();
    let mut params = ParamStore::zeros(specs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let shape = params.get(id).shape().to_vec();
        params.set(id, random_array(&shape, &mut rng)).unwrap();
    }
    (params, BufferStore::new(bufs))
}

fn to_mat(a: &ArrayD<f64>, b: usize) -> Mat {
    let (n, c) = (a.shape()[1], a.shape()[2]);
    (0..n).map(|i| (0..c).map(|j| a[[b, i, j]]).collect()).collect()
}

struct Refs<'a> {
    params: &'a ParamStore<f64>,
}

impl Refs<'_> {
    fn get(&self, name: &str) -> &ArrayD<f64> {
        self.params.get(self.params.id(name).unwrap_or_else(|| panic!("no parameter {name}")))
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.get(&format!("{name}.weight"));
        let b = self.params.id(&format!("{name}.bias")).map(|id| self.params.get(id));
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|o| {
                        let mut s = b.map_or(0.0, |b| b[[o]]);
                        for i in 0..din {
                            s += row[i] * w[[i, o]];
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    fn layer_norm(&self, x: &Mat, name: &str) -> Mat {
        let g = self.get(&format!("{name}.gain"));
        let b = self.get(&format!("{name}.bias"));
        x.iter()
            .map(|row| {
                let c = row.len() as f64;
                let mean = row.iter().sum::<f64>() / c;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
                let inv = 1.0 / (var + 1e-5).sqrt();
                row.iter().enumerate().map(|(j, v)| (v - mean) * inv * g[[j]] + b[[j]]).collect()
            })
            .collect()
    }

    /// Scaled dot-product attention per head, then the output projection.
    fn attention(&self, queries: &Mat, context: &Mat, name: &str, heads: usize, valid: &[bool]) -> Mat {
        let q = self.linear(queries, &format!("{name}.query"));
        let k = self.linear(context, &format!("{name}.key"));
        let v = self.linear(context, &format!("{name}.value"));
        let c = q[0].len();
        let dh = c / heads;
        let mut out = vec![vec![0.0; c]; q.len()];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        if !valid[j] {
                            return f64::NEG_INFINITY;
                        }
                        cols.clone().map(|x| qi[x] * kj[x]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exp.iter().sum();
                for (j, e) in exp.iter().enumerate() {
                    for x in cols.clone() {
                        out[i][x] += e / z * v[j][x];
                    }
                }
            }
        }
        self.linear(&out, &format!("{name}.out"))
    }

    fn mlp(&self, x: &Mat, name: &str) -> Mat {
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
        let h: Mat = self
            .linear(x, &format!("{name}.fc1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        self.linear(&h, &format!("{name}.fc2"))
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn assert_close(got: &Mat, want: &Mat, what: &str) {
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        for (j, (a, b)) in g.iter().zip(w).enumerate() {
            assert!((a - b).abs() <= TOL, "{what}[{i}][{j}]: {a} vs {b}");
        }
    }
}

fn small_config() -> ValidatedConfig {
    let mut c = toy_config();
    c.image_height = 16;
    c.image_width = 16;
    c.embed_dim = 8;
    c.encoder_layers = 2;
    c.tap_stages = vec![1, 2];
    c.fpn_dim = 4;
    c.fpn_heads = 2;
    c.decoder_heads = 2;
    c.upsample_steps = 1;
    c.validate().unwrap()
}

/// Runs `f` on `[v; t]` and returns the output tokens of sample `b`.
fn run_fusion(f: &Fusion, params: &ParamStore<f64>, buffers: &BufferStore<f64>, v: &ArrayD<f64>, t: &ArrayD<f64>, lens: Vec<usize>) -> ArrayD<f64> {
    let tape = Tape::new();
    let cx = Ctx::new(&tape, params, buffers, Mode::Eval);
    let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
    let layout = layout_for(&vv, &tv, lens, true).unwrap();
    let out = f.forward(&cx, concat_modalities(vv, tv, &layout), AttentionSite::Decoder);
    (*out.tokens.value()).clone()
}

#[test]
fn cross_attention_matches_straight_line_oracle() {
    // Two visual and two text tokens of width four.
    let mut pb = ParamBuilder::new();
    let f = Fusion::new(&mut pb, "x", SlotVariant::Cross, 4, 1).unwrap();
    let (params, buffers) = random_params(pb, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (v, t) = (random_array(&[1, 2, 4], &mut rng), random_array(&[1, 2, 4], &mut rng));
    let got = to_mat(&run_fusion(&f, &params, &buffers, &v, &t, vec![0]), 0);

    let r = Refs { params: &params };
    let (vm, tm) = (to_mat(&v, 0), to_mat(&t, 0));
    let (nv, nt) = (r.layer_norm(&vm, "x.ln"), r.layer_norm(&tm, "x.ln"));
    let mut want = add(&vm, &r.attention(&nv, &nt, "x.v2t", 1, &[true, true]));
    want.extend(tm.clone());
    assert_close(&got, &want, "cross");
}

#[test]
fn bidirectional_attention_matches_oracle() {
    let mut pb = ParamBuilder::new();
    let f = Fusion::new(&mut pb, "x", SlotVariant::Bidir, 4, 2).unwrap();
    let (params, buffers) = random_params(pb, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (v, t) = (random_array(&[1, 3, 4], &mut rng), random_array(&[1, 2, 4], &mut rng));
    let got = to_mat(&run_fusion(&f, &params, &buffers, &v, &t, vec![0]), 0);

    let r = Refs { params: &params };
    let (vm, tm) = (to_mat(&v, 0), to_mat(&t, 0));
    let (nv, nt) = (r.layer_norm(&vm, "x.ln"), r.layer_norm(&tm, "x.ln"));
    let mut want = add(&vm, &r.attention(&nv, &nt, "x.v2t", 2, &[true; 2]));
    want.extend(add(&tm, &r.attention(&nt, &nv, "x.t2v", 2, &[true; 3])));
    assert_close(&got, &want, "bidir");
}

#[test]
fn shared_attention_masks_padding_like_oracle() {
    let mut pb = ParamBuilder::new();
    let f = Fusion::new(&mut pb, "x", SlotVariant::Shared, 4, 2).unwrap();
    let (params, buffers) = random_params(pb, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    // Text rows [cls, word, eot, pad, pad] for sample 0 and no padding for sample 1.
    let (v, t) = (random_array(&[2, 2, 4], &mut rng), random_array(&[2, 5, 4], &mut rng));
    let out = run_fusion(&f, &params, &buffers, &v, &t, vec![1, 3]);

    let r = Refs { params: &params };
    for (b, valid) in [(0, vec![true, true, true, true, true, false, false]), (1, vec![true; 7])] {
        let mut x = to_mat(&v, b);
        x.extend(to_mat(&t, b));
        let want = add(&x, &r.attention(&r.layer_norm(&x, "x.ln"), &r.layer_norm(&x, "x.ln"), "x.attn", 2, &valid));
        assert_close(&to_mat(&out, b), &want, &format!("sample {b}"));
    }
}

#[test]
fn fpn_stage_matches_oracle() {
    let cfg = small_config();
    let mut pb = ParamBuilder::new();
    let fpn = SharedFpn::new(&mut pb, &cfg, SlotVariant::Shared);
    let (params, buffers) = random_params(pb, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (v, t) = (random_array(&[1, 5, 8], &mut rng), random_array(&[1, 3, 8], &mut rng));

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &params, &buffers, Mode::Eval);
    let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
    let layout = layout_for(&vv, &tv, vec![1], true).unwrap();
    let h = concat_modalities(vv, tv, &layout);
    let got = to_mat(&fpn.stages[1].forward(&cx, h, AttentionSite::Fpn(2)).tokens.value(), 0);

    let r = Refs { params: &params };
    let mut x = to_mat(&v, 0);
    x.extend(to_mat(&t, 0));
    let p = r.linear(&x, "fpn.stage2.proj");
    let n = r.layer_norm(&p, "fpn.stage2.ln");
    let want = add(&p, &r.attention(&n, &n, "fpn.stage2.attn", 2, &[true; 8]));
    assert_close(&got, &want, "fpn stage");
}

#[test]
fn decoder_fuse_matches_oracle() {
    let cfg = small_config();
    let mut pb = ParamBuilder::new();
    let dec = SharedMaskDecoder::new(&mut pb, &cfg);
    let (params, buffers) = random_params(pb, 51);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let (v, t) = (random_array(&[1, 5, 4], &mut rng), random_array(&[1, 4, 4], &mut rng));

    let tape = Tape::new();
    let cx = Ctx::new(&tape, &params, &buffers, Mode::Eval);
    let (vv, tv) = (tape.constant(v.clone()), tape.constant(t.clone()));
    let layout = layout_for(&vv, &tv, vec![1], true).unwrap();
    let got = to_mat(&dec.fuse(&cx, concat_modalities(vv, tv, &layout)).tokens.value(), 0);

    let r = Refs { params: &params };
    let mut z = to_mat(&v, 0);
    z.extend(to_mat(&t, 0));
    let valid = [true, true, true, true, true, true, true, true, false];
    let n = r.layer_norm(&z, "decoder.fuse.ln");
    let u1 = add(&z, &r.attention(&n, &n, "decoder.fuse.attn", 2, &valid));
    let want = add(&u1, &r.mlp(&r.layer_norm(&u1, "decoder.ln_mlp"), "decoder.mlp"));
    assert_close(&got, &want, "decoder fuse");
}
