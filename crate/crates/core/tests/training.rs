mod common;

use glide::model::{DraftModel, TargetModel};
use glide::tensor::{seeded_rng, TokenId};
use glide::train::{
    draft_batch_gradient, grad_check, run_train_job, train_pair, Corpus, StepStats, SyntheticCorpus,
};
use rand::Rng;

fn batch(vocab: usize, n: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(0..vocab as TokenId)).collect()).collect()
}

#[test]
fn grad_check_two_layer_draft() {
    let t = TargetModel::new(common::target_cfg(10, 16), 3).unwrap();
    let d = DraftModel::new(common::glide_cfg(t.cfg, 2, true), 4).unwrap();
    let r = grad_check(&d, &t, &batch(10, 2, 12, 5)).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:#?}");
    for name in ["layers.0.cross.wq", "layers.1.cross.wq", "layers.0.cross.wo", "layers.1.cross.wo"] {
        let g = r.group(name).unwrap();
        assert!(g.max_abs_grad > 0.0, "{name} got no gradient");
    }
}

#[test]
fn ablation_keeps_error_magnitude() {
    let t = TargetModel::new(common::target_cfg(10, 16), 8).unwrap();
    let d = DraftModel::new(common::glide_cfg(t.cfg, 1, true), 9).unwrap();
    let b = batch(10, 2, 12, 1);
    let full = grad_check(&d, &t, &b).unwrap();
    let ablated = grad_check(&d.without_cross_attention(), &t, &b).unwrap();
    assert!(ablated.group("layers.0.cross.wq").is_none());
    for g in &ablated.groups {
        let f = full.group(&g.name).unwrap();
        assert!(g.max_rel_error < 1e-5 && f.max_rel_error < 1e-5, "{}", g.name);
        assert!(g.max_abs_error < 10.0 * f.max_abs_error.max(1e-9), "{}", g.name);
    }
}

#[test]
fn untouched_embedding_rows_get_zero_gradient() {
    let t = TargetModel::new(common::target_cfg(10, 16), 1).unwrap();
    let d = DraftModel::new(common::glide_cfg(t.cfg, 1, true), 1).unwrap();
    let (_, g) = draft_batch_gradient(&d, &t, &[vec![0; 12], vec![0; 9]]).unwrap();
    let embed = &g.embed;
    assert!(embed.row(0).iter().any(|&x| x != 0.0));
    for r in 1..10 {
        assert!(embed.row(r).iter().all(|&x| x == 0.0), "row {r}");
    }
}

fn decreased(log: &[StepStats]) -> bool {
    log.last().unwrap().loss < log[0].loss
}

#[test]
fn small_job_trains_both_drafts() {
    let cfg = common::small_job(0);
    let out = run_train_job(&cfg).unwrap();
    assert!(decreased(&out.target_log));
    assert!(decreased(&out.glide_log));
    let (vanilla, vlog, valpha) = out.vanilla.as_ref().unwrap();
    assert!(decreased(vlog));
    assert_eq!(vlog.len(), out.glide_log.len());
    assert!(!vanilla.has_cross_attention());
    assert!((0.0..=1.0).contains(&out.glide_alpha) && (0.0..=1.0).contains(valpha));
}

#[test]
fn job_writes_checkpoints_logs_and_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::small_job(1);
    cfg.target_training.max_steps = Some(2);
    cfg.draft_training.max_steps = Some(2);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let out = run_train_job(&cfg).unwrap();
    for f in ["target.ckpt", "glide.ckpt", "vanilla.ckpt", "glide_log.csv", "train.spdc", "eval.spdc"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(DraftModel::load(dir.path().join("glide.ckpt")).unwrap(), out.glide);
    assert_eq!(Corpus::load(dir.path().join("eval.spdc")).unwrap(), out.corpus.eval);
    let csv = std::fs::read_to_string(dir.path().join("glide_log.csv")).unwrap();
    assert!(csv.starts_with("step,loss,grad_norm,lr\n"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn pair_uses_same_schedule() {
    let cfg = common::small_job(2);
    let corpus = SyntheticCorpus::generate(cfg.corpus).unwrap();
    let target = TargetModel::new(cfg.target, 0).unwrap();
    let mut tc = cfg.draft_training;
    tc.max_steps = Some(3);
    let p = train_pair(cfg.draft.glide_config(cfg.target, 5), &target, &corpus, &tc).unwrap();
    let steps = |l: &[StepStats]| l.iter().map(|s| (s.step, s.lr)).collect::<Vec<_>>();
    assert_eq!(steps(&p.glide_log), steps(&p.vanilla_log));
}

#[test]
fn toml_job_config_parses() {
    let text = r#"
        train_vanilla = true
        [corpus]
        kind = "grammar"
        vocab = 16
        seq_len = 24
        train = 64
        eval = 8
        seed = 1
        [target]
        n_layers = 2
        n_heads = 2
        head_dim = 4
        vocab = 16
        max_seq = 32
        ffn_dim = 16
        [target_training]
        epochs = 2
        [target_training.optimizer]
        learning_rate = 0.003
        beta1 = 0.9
        beta2 = 0.999
        eps = 1e-8
        weight_decay = 0.01
        [draft]
        n_layers = 1
        draft_dim = 8
        draft_heads = 2
        ffn_dim = 16
        [draft_training]
        batch_size = 8
    "#;
    let cfg = glide::train::TrainJobConfig::from_toml(text).unwrap();
    assert_eq!(cfg.target_training.epochs, 2);
    assert_eq!(cfg.target_training.optimizer.learning_rate, 0.003);
    assert_eq!(cfg.draft_training.block_length, 5);
    assert_eq!(cfg.draft_training.optimizer.learning_rate, 5e-4);
}
