use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(num_blocks: usize) -> ModelConfig {
    ModelConfig {
        num_blocks,
        embed_dim: 8,
        heads: 2,
        patch_size: 4,
        stride: 2,
        image_height: 8,
        image_width: 8,
        codebook_size: 6,
        levels: 2,
        num_ids: 3,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

fn model(config: ModelConfig, seed: u64) -> Model {
    Model::new(config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn images<T: Element>(config: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([batch, 3, config.image_height, config.image_width], |_| T::of(rng.random_range(-1.0..1.0)))
}

/// Gives every parameter a visible random value, including biases and gains.
fn perturb(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn patch_counts() {
    let mut c = tiny(2);
    c.image_height = 4;
    c.image_width = 4;
    c.stride = 4;
    assert_eq!(c.num_patches(), 1);
    let c = ModelConfig { image_height: 32, image_width: 32, patch_size: 16, stride: 8, ..ModelConfig::default() };
    assert_eq!(c.grid(), (3, 3));
    assert_eq!(c.seq_len(), 11);
}

#[test]
fn config_rejects_bad_shapes() {
    assert!(ModelConfig { stride: 17, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { image_width: 70, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig { heads: 3, ..ModelConfig::default() }.validate().is_err());
    assert!(ModelConfig::default().validate().is_ok());
}

#[test]
fn im2col_picks_overlapping_windows() {
    let c = tiny(1);
    let m = model(c.clone(), 0);
    let img = Tensor::<f64>::from_fn([1, 3, 8, 8], |i| i as f64);
    let cols = m.im2col(&img).unwrap();
    assert_eq!(cols.shape(), &[9, 48]);
    // patch (1, 2): rows 2.., cols 4..; channel 2, dy 3, dx 1
    let patch = 3 + 2;
    let want = ((2 * 8 + 2 + 3) * 8 + 4 + 1) as f64;
    assert_eq!(cols.at(patch, 2 * 16 + 3 * 4 + 1), want);
}

#[test]
fn zero_image_patches_are_position_embeddings() {
    let c = tiny(2);
    let m = model(c.clone(), 1);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let x = m.patch_embed(&g, &p, &Tensor::zeros([2, 3, 8, 8])).unwrap();
    let (xv, pos) = (g.tensor(x), m.params().get("pos").unwrap().cast::<f64>());
    let t = c.seq_len();
    for b in 0..2 {
        for j in 2..t {
            assert_eq!(xv.row(b * t + j), pos.row(j));
        }
        let cls = m.params().get("cls_local").unwrap().cast::<f64>();
        let want: Vec<f64> = cls.data().iter().zip(pos.row(1)).map(|(a, b)| a + b).collect();
        assert_eq!(xv.row(b * t + 1), &want[..]);
    }
}

#[test]
fn single_block_model_has_identity_encoder() {
    let m = model(tiny(1), 2);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let x = m.patch_embed(&g, &p, &images(m.config(), 2, 3)).unwrap();
    assert_eq!(m.encode(&g, &p, x).unwrap(), x);
}

#[test]
fn identical_patches_stay_identical() {
    let c = tiny(3);
    let mut m = model(c.clone(), 4);
    perturb(&mut m, 5);
    let pos = m.params().position("pos").unwrap();
    m.params_mut().tensors_mut()[pos].data_mut().fill(0.0);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let img = Tensor::from_fn([1, 3, 8, 8], |i| [0.2, -0.4, 0.7][i / 64]);
    let x = m.encode(&g, &p, m.patch_embed(&g, &p, &img).unwrap()).unwrap();
    let xv = g.tensor(x);
    for j in 3..c.seq_len() {
        assert!(xv.row(j).iter().zip(xv.row(2)).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

/// Pre-norm block written with plain loops.
fn block_oracle(m: &Model, x: &[f64], batch: usize, i: usize) -> Vec<f64> {
    let c = m.config();
    let (t, d, h) = (c.seq_len(), c.embed_dim, c.heads);
    let dh = d / h;
    let w = |s: &str| m.params().get(&format!("block{i}.{s}")).unwrap().cast::<f64>().into_data();
    let ln = |x: &[f64], gain: &[f64], bias: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..x.len() / d {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            for k in 0..d {
                out[r * d + k] = (row[k] - mean) / (var + LN_EPS).sqrt() * gain[k] + bias[k];
            }
        }
        out
    };
    let lin = |x: &[f64], wt: &[f64], b: &[f64], n_in: usize, n_out: usize| -> Vec<f64> {
        let rows = x.len() / n_in;
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            for o in 0..n_out {
                out[r * n_out + o] = b[o] + (0..n_in).map(|k| x[r * n_in + k] * wt[k * n_out + o]).sum::<f64>();
            }
        }
        out
    };
    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
    let hn = ln(x, &w("ln1.gain"), &w("ln1.bias"));
    let q = lin(&hn, &w("attn.q.weight"), &w("attn.q.bias"), d, d);
    let k = lin(&hn, &w("attn.k.weight"), &w("attn.k.bias"), d, d);
    let v = lin(&hn, &w("attn.v.weight"), &w("attn.v.bias"), d, d);
    let mut a = vec![0.0; x.len()];
    for b in 0..batch {
        for head in 0..h {
            for r in 0..t {
                let at = |row: usize, col: usize| (b * t + row) * d + head * dh + col;
                let scores: Vec<f64> = (0..t)
                    .map(|s| (0..dh).map(|e| q[at(r, e)] * k[at(s, e)]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for e in 0..dh {
                    a[at(r, e)] = (0..t).map(|s| (scores[s] - mx).exp() / z * v[at(s, e)]).sum();
                }
            }
        }
    }
    let o = lin(&a, &w("attn.proj.weight"), &w("attn.proj.bias"), d, d);
    let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
    let hn = ln(&x1, &w("ln2.gain"), &w("ln2.bias"));
    let f = lin(&hn, &w("mlp.fc1.weight"), &w("mlp.fc1.bias"), d, d * c.mlp_ratio)
        .into_iter()
        .map(gelu)
        .collect::<Vec<_>>();
    let f2 = lin(&f, &w("mlp.fc2.weight"), &w("mlp.fc2.bias"), d * c.mlp_ratio, d);
    x1.iter().zip(&f2).map(|(a, b)| a + b).collect()
}

#[test]
fn encoder_and_decoder_match_chained_block_oracle() {
    let mut m = model(tiny(3), 6);
    perturb(&mut m, 7);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let x0 = m.patch_embed(&g, &p, &images(m.config(), 2, 8)).unwrap();
    let enc = m.encode(&g, &p, x0).unwrap();
    let dec = m.decode(&g, &p, enc).unwrap();
    let start = g.tensor(x0).into_data();
    let want_enc = block_oracle(&m, &block_oracle(&m, &start, 2, 0), 2, 1);
    let want_dec = block_oracle(&m, &want_enc, 2, 2);
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff(g.value(enc).data(), &want_enc) <= 1e-6);
    assert!(diff(g.value(dec).data(), &want_dec) <= 1e-6);
}

#[test]
fn reconstruct_bypasses_cls_and_emits_codebook_rows() {
    let c = tiny(2);
    let m = model(c.clone(), 9);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let x = m.encode(&g, &p, m.patch_embed(&g, &p, &images(&c, 3, 10)).unwrap()).unwrap();
    let (y, idx) = m.reconstruct(&g, &p, x, &mut GumbelNoise::sampled(11)).unwrap();
    let (xv, yv) = (g.tensor(x), g.tensor(y));
    let cb = m.codebook().cast::<f64>();
    let t = c.seq_len();
    for b in 0..3 {
        assert_eq!(xv.row(b * t), yv.row(b * t));
        assert_eq!(xv.row(b * t + 1), yv.row(b * t + 1));
        for j in 2..t {
            let row = yv.row(b * t + j);
            assert!((0..cb.rows()).any(|r| cb.row(r) == row));
            assert_eq!(row, cb.row(idx[b * (t - 2) + j - 2]));
        }
    }
}

#[test]
fn reconstruct_fixed_point_on_codebook_rows() {
    let c = tiny(2);
    let mut m = model(c.clone(), 12);
    // orthonormal-ish codebook so each row is its own best match
    let cb = Tensor::from_fn([6, 8], |i| if i / 8 == i % 8 { 3.0 } else { 0.0 });
    let pos = m.params().position("codebook").unwrap();
    m.params_mut().tensors_mut()[pos] = cb.clone();
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let t = c.seq_len();
    let x = Tensor::from_fn([1, t, 8], |i| {
        let (row, col) = (i / 8, i % 8);
        if row < 2 {
            0.5
        } else {
            cb.at((row - 2) % 6, col) as f64
        }
    });
    let xv = g.constant(x.clone());
    let (y, _) = m.reconstruct(&g, &p, xv, &mut GumbelNoise::Zero).unwrap();
    assert_eq!(g.tensor(y), x);
}

#[test]
fn zero_patches_reduce_local_fusion_to_cls() {
    let c = tiny(2);
    let m = model(c.clone(), 13);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let t = c.seq_len();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::from_fn([2, t, 8], |i| if (i / 8) % t < 2 { rng.random_range(-1.0..1.0) } else { 0.0 });
    let h = m.heads(&g, &p, g.constant(x.clone()), Mode::Eval).unwrap();
    let flat = g.constant(x.reshape([2 * t, 8]).unwrap());
    let cls = g.gather_rows(flat, &[1, t + 1]).unwrap();
    let ln = g.layer_norm(cls, p.var("norm.gain"), p.var("norm.bias"), LN_EPS).unwrap();
    assert_eq!(g.tensor(h.local_pre), g.tensor(ln));
    assert_eq!(g.shape(h.id_logits), vec![2, c.num_ids]);
    assert_eq!(g.shape(h.id_logits_global), vec![2, c.num_ids]);
}

#[test]
fn eval_neck_is_the_running_affine_map() {
    let c = tiny(2);
    let mut m = model(c.clone(), 15);
    perturb(&mut m, 16);
    for name in ["neck_global.running_var", "neck_local.running_var"] {
        let i = m.params().position(name).unwrap();
        m.params_mut().tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.5);
    }
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_fn([3, 8], |_| rng.random_range(-2.0..2.0));
    let get = |n: &str| m.params().get(n).unwrap().cast::<f64>();
    let (mean, var, gain) = (get("neck_global.running_mean"), get("neck_global.running_var"), get("neck_global.gain"));
    for scale in [1.0, 2.5, -0.5] {
        let xs = Tensor::from_fn([3, 8], |i| x.data()[i] * scale);
        let (y, stats) = m.neck(&g, &p, g.constant(xs), "neck_global", Mode::Eval).unwrap();
        assert!(stats.is_none());
        let yv = g.tensor(y);
        for i in 0..24 {
            let k = i % 8;
            let want = (scale * x.data()[i] - mean.data()[k]) / (var.data()[k] + BN_EPS).sqrt() * gain.data()[k];
            assert!((yv.data()[i] - want).abs() <= 1e-9);
        }
    }
}

#[test]
fn running_stats_update_uses_unbiased_variance() {
    let mut m = model(tiny(2), 18);
    let s = BatchStats { mean: vec![1.0f64; 8], var: vec![3.0; 8], count: 4 };
    m.update_running_stats(&(s.clone(), s));
    let mean = m.params().get("neck_local.running_mean").unwrap();
    let var = m.params().get("neck_local.running_var").unwrap();
    assert!((mean.data()[0] - 0.1).abs() < 1e-7);
    assert!((var.data()[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-6);
}

#[test]
fn unquantized_forward_is_a_plain_transformer() {
    let c = tiny(3);
    let m = model(c.clone(), 19);
    let img = images::<f64>(&c, 2, 20);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let f = m.forward(&g, &p, &img, Mode::Train, false, &mut GumbelNoise::sampled(0)).unwrap();
    assert!(f.code_indices.is_none());
    let mut x = m.patch_embed(&g, &p, &img).unwrap();
    for i in 0..3 {
        x = m.block(&g, &p, x, i).unwrap();
    }
    assert_eq!(g.tensor(f.tokens), g.tensor(x));
}

#[test]
fn descriptors_are_deterministic_unit_vectors() {
    let c = tiny(2);
    let m = model(c.clone(), 21);
    let img = images::<f32>(&c, 4, 22);
    for quantize in [false, true] {
        let (a, b) = (m.descriptors(&img, quantize).unwrap(), m.descriptors(&img, quantize).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 16]);
        for r in 0..4 {
            let n: f64 = a.row(r).iter().map(|v| (*v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() <= 1e-6);
            let cos: f64 = a.row(r).iter().zip(b.row(r)).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
            assert!((cos - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn default_config_forward_stays_finite() {
    let c = ModelConfig::default();
    let m = model(c.clone(), 23);
    for chunk in 0..20 {
        let img = images::<f32>(&c, 50, 100 + chunk);
        let g = Graph::<f32>::new();
        let p = m.bind_frozen(&g);
        let f = m.forward(&g, &p, &img, Mode::Train, true, &mut GumbelNoise::sampled(chunk)).unwrap();
        assert!(g.value(f.heads.id_logits).is_finite());
        assert!(m.descriptors(&img, true).unwrap().is_finite());
    }
}

#[test]
fn codebook_and_encoder_receive_gradients_through_quantizer() {
    let c = tiny(3);
    let m = model(c.clone(), 24);
    let img = images::<f64>(&c, 4, 25);
    let g = Graph::<f64>::new();
    let p = m.bind(&g);
    let f = m.forward(&g, &p, &img, Mode::Train, true, &mut GumbelNoise::sampled(26)).unwrap();
    let loss = g.cross_entropy(f.heads.id_logits, &[0, 1, 2, 0], 0.1).unwrap();
    let grads = g.backward(loss).unwrap();
    for name in ["codebook", "block0.attn.q.weight", "block0.mlp.fc1.weight", "patch.weight"] {
        let gv = grads.get(p.var(name)).unwrap();
        assert!(gv.iter().any(|&v| v != 0.0), "{name} has no gradient");
    }
}

#[test]
fn from_named_checks_layout() {
    let m = model(tiny(2), 27);
    let named: Vec<_> = m.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
    assert_eq!(Model::from_named(tiny(2), named.clone()).unwrap(), m);
    assert!(Model::from_named(tiny(3), named.clone()).is_err());
    let mut renamed = named;
    renamed[0].0 = "other".into();
    assert!(Model::from_named(tiny(2), renamed).is_err());
}
