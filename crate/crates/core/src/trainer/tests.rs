use super::*;
use crate::model::ModelConfig;

fn toy() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        model: ModelConfig {
            num_blocks: 2,
            embed_dim: 16,
            heads: 2,
            patch_size: 8,
            stride: 4,
            image_height: 16,
            image_width: 16,
            codebook_size: 16,
            levels: 2,
            num_ids: 8,
            mlp_ratio: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            batch_size: 16,
            ids_per_batch: 4,
            instances_per_id: 4,
            epochs: 1,
            lr: 2e-3,
            pad: 2,
            ..TrainConfig::default()
        },
        synth: SynthSpec {
            num_ids: 8,
            images_per_id: 20,
            render_height: 16,
            render_width: 16,
            query_per_id: 2,
            gallery_per_id: 2,
            ..SynthSpec::default()
        },
    };
    cfg.validate().unwrap();
    cfg.synth.num_ids = cfg.model.num_ids;
    cfg
}

fn fixed_batch(cfg: &RunConfig, data: &Dataset) -> (Tensor<f32>, Vec<usize>) {
    let picks: Vec<usize> = (0..4).flat_map(|id| (0..4).map(move |k| id * 16 + k)).collect();
    let imgs: Vec<Tensor<f32>> = picks.iter().map(|&i| data.train[i].image.clone()).collect();
    let labels = picks.iter().map(|&i| data.train[i].id).collect();
    assert_eq!(imgs[0].shape(), &[3, cfg.model.image_height, cfg.model.image_width]);
    (stack_images(&imgs).unwrap(), labels)
}

fn batch_loss(cfg: &RunConfig, model: &Model, images: &Tensor<f32>, labels: &[usize]) -> f64 {
    let g = Graph::<f32>::new();
    let p = model.bind_frozen(&g);
    let out = total_loss(&g, model, &p, images, labels, &cfg.train, &mut GumbelNoise::sampled(0)).unwrap();
    out.breakdown.total
}

#[test]
fn one_epoch_reduces_the_loss() {
    let mut cfg = toy();
    cfg.train.epochs = 1;
    cfg.synth.images_per_id = 44;
    let data = synth_dataset(&cfg.synth, 1).unwrap();
    let (images, labels) = fixed_batch(&cfg, &data);
    let mut state = TrainState::init(&cfg).unwrap();
    let before = batch_loss(&cfg, &state.model, &images, &labels);
    let log = train(&cfg, &data, &mut state, |_, _| Ok(())).unwrap();
    assert_eq!(log.len(), 1);
    assert!(state.step() > 0);
    let after = batch_loss(&cfg, &state.model, &images, &labels);
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn same_seed_same_log_and_resume_continues_steps() {
    let mut cfg = toy();
    let data = synth_dataset(&cfg.synth, 2).unwrap();
    let run = |cfg: &RunConfig| {
        let mut st = TrainState::init(cfg).unwrap();
        let log = train(cfg, &data, &mut st, |_, _| Ok(())).unwrap();
        (log, st)
    };
    let (a, sa) = run(&cfg);
    let (b, _) = run(&cfg);
    assert_eq!(a, b);
    let lines = |l: &[EpochLog]| l.iter().map(ToString::to_string).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));

    let first = sa.step();
    cfg.train.epochs = 2;
    let mut resumed = sa;
    let mut seen = Vec::new();
    let log = train(&cfg, &data, &mut resumed, |e, s| {
        seen.push((e.epoch, s.step()));
        Ok(())
    })
    .unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(seen, vec![(2, 2 * first)]);
    // already complete: nothing left to do
    assert!(train(&cfg, &data, &mut resumed, |_, _| Ok(())).unwrap().is_empty());
}

fn f64_loss(cfg: &TrainConfig, seed: u64) -> (Graph<f64>, Model, LossBreakdown, Var, Vec<Var>, Option<Vec<usize>>) {
    let rc = toy();
    let data = synth_dataset(&rc.synth, 3).unwrap();
    let (images, labels) = fixed_batch(&rc, &data);
    let model = TrainState::init(&RunConfig { seed, ..rc }).unwrap().model;
    let g = Graph::<f64>::new();
    let (out, vars) = {
        let p = model.bind(&g);
        let out = total_loss(&g, &model, &p, &images.cast(), &labels, cfg, &mut GumbelNoise::sampled(9)).unwrap();
        (out, p.vars().to_vec())
    };
    let codes = out.forward.code_indices.clone();
    (g, model, out.breakdown, out.total, vars, codes)
}

#[test]
fn breakdown_sums_to_total() {
    let cfg = TrainConfig { lambda_hs: 0.7, lambda_id: 1.3, lambda_tri: 0.4, lambda_orth: 0.25, ..toy().train };
    let (g, _, b, total, _, _) = f64_loss(&cfg, 1);
    let want = 0.7 * b.hs + 1.3 * b.id + 0.4 * b.tri + 0.25 * b.orth;
    assert!((b.total - want).abs() <= 1e-10);
    assert!((g.value(total).item() - b.total).abs() <= 1e-10);
    assert!(b.hs > 0.0 && b.id > 0.0 && b.orth > 0.0);
}

#[test]
fn zero_weights_give_zero_loss_and_gradients() {
    let cfg = TrainConfig { lambda_hs: 0.0, lambda_id: 0.0, lambda_tri: 0.0, lambda_orth: 0.0, ..toy().train };
    let (g, _, b, total, vars, _) = f64_loss(&cfg, 2);
    assert_eq!(b.total, 0.0);
    assert_eq!(g.value(total).item(), 0.0);
    let grads = g.backward(total).unwrap();
    for v in vars {
        if let Some(gv) = grads.get(v) {
            assert!(gv.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn baseline_bypasses_quantizer_and_uses_cross_entropy() {
    let cfg = TrainConfig { ablation: Ablation::BASELINE, ..toy().train };
    let (g, model, b, total, vars, codes) = f64_loss(&cfg, 3);
    assert!(codes.is_none());
    assert_eq!(b.orth, 0.0);
    let grads = g.backward(total).unwrap();
    let cb = model.params().position("codebook").unwrap();
    let centers = model.params().position("centers").unwrap();
    for i in [cb, centers] {
        assert!(grads.get(vars[i]).is_none_or(|gv| gv.iter().all(|&x| x == 0.0)));
    }
    // the hs slot holds plain smoothed cross-entropy of the global head
    let idg = model.params().position("id_global.weight").unwrap();
    assert!(grads.get(vars[idg]).unwrap().iter().any(|&x| x != 0.0));
}

#[test]
fn full_config_sends_gradients_through_the_quantizer() {
    let (g, model, _, total, vars, codes) = f64_loss(&toy().train, 4);
    assert!(codes.is_some());
    let grads = g.backward(total).unwrap();
    for name in ["codebook", "centers", "block0.attn.q.weight", "patch.weight"] {
        let i = model.params().position(name).unwrap();
        assert!(grads.get(vars[i]).unwrap().iter().any(|&x| x != 0.0), "{name}");
    }
}

#[test]
fn bad_batch_composition_is_rejected() {
    let rc = toy();
    let data = synth_dataset(&rc.synth, 3).unwrap();
    let (images, _) = fixed_batch(&rc, &data);
    let model = TrainState::init(&rc).unwrap().model;
    let g = Graph::<f32>::new();
    let p = model.bind(&g);
    let labels = vec![0; 16];
    let r = total_loss(&g, &model, &p, &images, &labels, &rc.train, &mut GumbelNoise::Zero);
    assert!(matches!(r, Err(Error::Batch(_))));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = toy();
    let data = synth_dataset(&cfg.synth, 4).unwrap();
    let mut state = TrainState::init(&cfg).unwrap();
    let i = state.model.params().position("patch.weight").unwrap();
    state.model.params_mut().tensors_mut()[i].data_mut().fill(1e38);
    let err = train(&cfg, &data, &mut state, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0, .. }), "{err}");
}

#[test]
fn epoch_log_line_format() {
    let e = EpochLog {
        epoch: 3,
        loss: LossBreakdown { total: 1.5, hs: 0.5, id: 0.25, tri: 0.125, orth: 2.0 },
        map: 0.75,
        rank1: 1.0,
    };
    assert_eq!(e.to_string(), "3\t1.500000\t0.500000\t0.250000\t0.125000\t2.000000\t0.750000\t1.000000");
}
