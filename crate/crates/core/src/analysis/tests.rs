use super::*;
use crate::env::{sample_instance, TaskSpec};
use crate::grpo::{collect_group, OptimizerKind};
use crate::policy::{init_policy, sgd_step, CheckpointMeta, Weights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn toks(ids: &[u8]) -> Vec<Token> {
    ids.iter().map(|&i| Token::from_id(i.into()).unwrap()).collect()
}

#[test]
fn embedding_is_unit_or_zero() {
    let e = embed_trajectory(&toks(&[10, 3, 11, 12]));
    assert!((e.norm() - 1.0).abs() < 1e-9);
    assert!((e.cosine(&e) - 1.0).abs() < 1e-12);
    assert_eq!(e, embed_trajectory(&toks(&[10, 3, 11, 12])));
    let z = embed_trajectory(&[]);
    assert!(z.vector.iter().all(|v| *v == 0.0));
    assert_eq!(z.vector.len(), EMBED_DIM);
}

#[test]
fn disjoint_sequences_are_nearly_orthogonal() {
    // Sequences of answer length (3 to 6 tokens) over disjoint token sets.
    let a_set = [0u8, 1, 2, 3, 4, 5];
    let b_set = [6u8, 7, 8, 9, 10, 11, 12];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..2000 {
        let la = rng.gen_range(3..=6);
        let lb = rng.gen_range(3..=6);
        let a: Vec<u8> = (0..la).map(|_| a_set[rng.gen_range(0..a_set.len())]).collect();
        let b: Vec<u8> = (0..lb).map(|_| b_set[rng.gen_range(0..b_set.len())]).collect();
        let c = embed_trajectory(&toks(&a)).cosine(&embed_trajectory(&toks(&b)));
        worst = worst.max(c.abs());
    }
    assert!(worst <= 0.3, "worst |cos| = {worst}");
}

#[test]
fn diversity_examples() {
    let x = toks(&[10, 3, 11, 12]);
    assert_eq!(diversity(&[x.clone(), x.clone(), x.clone()]).unwrap(), 0.0);
    assert!(matches!(diversity(std::slice::from_ref(&x)), Err(Error::Validation(_))));

    let e1 = TrajectoryEmbedding { vector: unit(0) };
    let e2 = TrajectoryEmbedding { vector: unit(1) };
    assert!((diversity_of_embeddings(&[e1.clone(), e2.clone()]).unwrap() - 1.0).abs() < 1e-15);
    // Pairs (a,a'),(a,b),(a,b'),(a',b),(a',b'),(b,b') have cosines 1,0,0,0,0,1.
    let d = diversity_of_embeddings(&[e1.clone(), e1, e2.clone(), e2]).unwrap();
    assert!((d - 4.0 / 6.0).abs() < 1e-15);
}

fn unit(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; EMBED_DIM];
    v[i] = 1.0;
    v
}

fn arb_traj() -> impl Strategy<Value = Vec<Token>> {
    proptest::collection::vec(0u8..13, 0..7).prop_map(|v| toks(&v))
}

proptest! {
    #[test]
    fn diversity_bounded_and_permutation_invariant(
        mut ts in proptest::collection::vec(arb_traj(), 2..8),
        rot in 0usize..8,
    ) {
        let d = diversity(&ts).unwrap();
        prop_assert!((0.0..=2.0).contains(&d));
        let n = ts.len();
        ts.rotate_left(rot % n);
        ts.swap(0, n - 1);
        prop_assert!((diversity(&ts).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn projection_is_scale_equivariant(
        g in proptest::collection::vec(-5.0f64..5.0, 6),
        a in proptest::collection::vec(-5.0f64..5.0, 6),
        c in -10.0f64..10.0,
    ) {
        prop_assume!(a.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let scaled: Vec<f64> = g.iter().map(|x| c * x).collect();
        let r = projection_ratio(&g, &a).unwrap();
        let rs = projection_ratio(&scaled, &a).unwrap();
        prop_assert!((rs - c * r).abs() <= 1e-9 * (1.0 + (c * r).abs()));
    }

    #[test]
    fn bt_probabilities_shift_invariant(
        wins in proptest::collection::vec((0usize..3, 0usize..3, 0u8..3), 6..30),
        shift in -5.0f64..5.0,
    ) {
        let mut cmp: Vec<Comparison> = vec![
            Comparison::new("a", "b", Outcome::Tie),
            Comparison::new("b", "c", Outcome::Tie),
        ];
        let names = ["a", "b", "c"];
        for (i, j, o) in wins {
            if i == j { continue; }
            let o = [Outcome::FirstWins, Outcome::SecondWins, Outcome::Tie][o as usize];
            cmp.push(Comparison::new(names[i], names[j], o));
        }
        let fit = bt_fit(&cmp).unwrap();
        let total: f64 = fit.strengths.iter().map(|b| b.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        let shifted = BtFit {
            strengths: fit.strengths.iter().map(|b| b + shift).collect(),
            ..fit.clone()
        };
        for x in names {
            for y in names {
                let p = fit.win_prob(x, y).unwrap();
                let q = shifted.win_prob(x, y).unwrap();
                prop_assert!((p - q).abs() < 1e-12);
                prop_assert!((p + fit.win_prob(y, x).unwrap() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn projection_examples() {
    let a = vec![1.0, 2.0, -1.0];
    assert!((projection_ratio(&a, &a).unwrap() - 1.0).abs() < 1e-15);
    let orth = vec![2.0, -1.0, 0.0];
    assert_eq!(projection_ratio(&orth, &a).unwrap(), 0.0);
    let mixed: Vec<f64> = a.iter().zip(&orth).map(|(x, o)| 0.3 * x + o).collect();
    assert!((projection_ratio(&mixed, &a).unwrap() - 0.3).abs() < 1e-15);
    assert!(matches!(projection_ratio(&a, &[0.0; 3]), Err(Error::Validation(_))));
    assert!(projection_ratio(&a, &[1.0]).is_err());
}

#[test]
fn bt_examples() {
    let mut cmp = Vec::new();
    for _ in 0..7 {
        cmp.push(Comparison::new("A", "B", Outcome::FirstWins));
    }
    for _ in 0..3 {
        cmp.push(Comparison::new("B", "A", Outcome::FirstWins));
    }
    let fit = bt_fit(&cmp).unwrap();
    assert!((fit.win_prob("A", "B").unwrap() - 0.7).abs() < 1e-9);

    let ties = vec![Comparison::new("A", "B", Outcome::Tie); 4];
    let fit = bt_fit(&ties).unwrap();
    assert_eq!(fit.win_prob("A", "B").unwrap(), 0.5);
    assert_eq!(fit.strengths[0], fit.strengths[1]);

    let split = vec![
        Comparison::new("A", "B", Outcome::FirstWins),
        Comparison::new("C", "D", Outcome::FirstWins),
    ];
    assert!(matches!(bt_fit(&split), Err(Error::Validation(_))));
    assert!(bt_fit(&[]).is_err());
}

#[test]
fn bt_ties_count_half() {
    // A beats B twice, two ties: 3 of 4 "wins".
    let cmp = vec![
        Comparison::new("A", "B", Outcome::FirstWins),
        Comparison::new("A", "B", Outcome::FirstWins),
        Comparison::new("A", "B", Outcome::Tie),
        Comparison::new("B", "A", Outcome::Tie),
    ];
    let fit = bt_fit(&cmp).unwrap();
    assert!((fit.win_prob("A", "B").unwrap() - 0.75).abs() < 1e-9);
}

fn ckpt(params: PolicyParams, step: usize) -> Checkpoint {
    Checkpoint {
        params,
        meta: CheckpointMeta {
            global_step: step,
            master_seed: 0,
        },
    }
}

fn tiny_task() -> TaskSpec {
    TaskSpec {
        grid: 16,
        max_per_shape: 1,
        ..TaskSpec::default()
    }
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        n1: 3,
        n2: 3,
        features: 8,
        hidden: 8,
        optimizer: OptimizerKind::Sgd,
        lr: 0.5,
        ..TrainConfig::default()
    }
}

#[test]
fn anchor_gradient_examples() {
    let cfg = tiny_cfg();
    let p = init_policy(cfg.dims(&tiny_task()), 1).unwrap();
    let a = ckpt(p.clone(), 0);
    assert!(anchor_gradient(&a, &a, &DEFAULT_SELECTION)
        .unwrap()
        .iter()
        .all(|v| *v == 0.0));

    let mut g = Weights::zeros(&p.dims);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    g.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    let mut q = p.clone();
    sgd_step(&mut q, &g, 0.25).unwrap();
    let anchor = anchor_gradient(&a, &ckpt(q.clone(), 1), &TENSOR_NAMES).unwrap();
    let want: Vec<f64> = g.flat().iter().map(|v| -0.25 * v).collect();
    for (x, y) in anchor.iter().zip(&want) {
        assert!((x - y).abs() < 1e-15);
    }

    let mut a1 = anchor_gradient(&a, &ckpt(q.clone(), 1), &["W1", "b2"]).unwrap();
    let mut a2 = anchor_gradient(&a, &ckpt(q.clone(), 1), &["b2", "W1"]).unwrap();
    assert_ne!(a1, a2);
    a1.sort_by(f64::total_cmp);
    a2.sort_by(f64::total_cmp);
    assert_eq!(a1, a2);

    let other = init_policy(cfg.dims(&tiny_task()), 2).unwrap();
    assert!(matches!(
        anchor_gradient(&a, &ckpt(other, 1), &DEFAULT_SELECTION),
        Err(Error::Validation(_))
    ));
    assert!(anchor_gradient(&a, &a, &[]).is_err());
    assert!(anchor_gradient(&a, &a, &["W9"]).is_err());
}

fn one_step_replay(cfg: &TrainConfig, p: &PolicyParams, step: usize) -> ReplayStep {
    let groups: Vec<_> = (0..4)
        .map(|s| {
            let inst = sample_instance(&tiny_task(), s).unwrap();
            let mut g = collect_group(p, &inst, cfg, 300.0, 50 + s).unwrap();
            // Force informative advantages so every subgroup contributes.
            g.advantages = (0..g.trajectories.len())
                .map(|i| if (i + s as usize).is_multiple_of(2) { 1.0 } else { -0.7 })
                .collect();
            g
        })
        .collect();
    ReplayStep::from_groups(step, &groups)
}

#[test]
fn subgroup_gradients_add_up_for_one_sgd_step() {
    let cfg = tiny_cfg();
    let mut p = init_policy(cfg.dims(&tiny_task()), 5).unwrap();
    p.weights.iter_mut().for_each(|w| *w *= 3.0);
    let replay = one_step_replay(&cfg, &p, 1);
    let start = ckpt(p.clone(), 0);
    let mut q = p.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &q);
    update_step_masked(&mut q, &mut opt, &replay.to_groups(&p).unwrap(), &cfg, LossMask::All)
        .unwrap();
    let end = ckpt(q, 1);

    let rep = grad_report(&start, &end, std::slice::from_ref(&replay), &cfg, 2, &DEFAULT_SELECTION)
        .unwrap();
    for ((a, c), n) in rep.anchor.iter().zip(&rep.g_clean).zip(&rep.g_noisy) {
        assert!((a - c - n).abs() < 1e-10);
    }
    assert!((rep.r_clean + rep.r_noisy - 1.0).abs() < 1e-9);
    assert!(rep.r_noisy.abs() > 1e-3);

    let mut zeroed = replay.clone();
    for g in &mut zeroed.groups {
        for (a, s) in g.advantages.iter_mut().zip(&g.sources) {
            if *s == crate::policy::Source::Noisy {
                *a = 0.0;
            }
        }
    }
    let gn = subgroup_gradient(
        &start,
        std::slice::from_ref(&zeroed),
        LossMask::NoisyOnly,
        &cfg,
        1,
        &DEFAULT_SELECTION,
    )
    .unwrap();
    assert!(gn.iter().all(|v| *v == 0.0));
}

#[test]
fn clean_mask_without_noisy_rollouts_is_the_anchor() {
    let cfg = TrainConfig {
        n1: 6,
        n2: 0,
        ..tiny_cfg()
    };
    let p = init_policy(cfg.dims(&tiny_task()), 5).unwrap();
    let replay = one_step_replay(&cfg, &p, 3);
    let mut q = p.clone();
    let mut opt = OptimizerState::new(cfg.optimizer, &q);
    update_step_masked(&mut q, &mut opt, &replay.to_groups(&p).unwrap(), &cfg, LossMask::All)
        .unwrap();
    let start = ckpt(p, 2);
    let anchor = anchor_gradient(&start, &ckpt(q, 3), &DEFAULT_SELECTION).unwrap();
    let g = subgroup_gradient(
        &start,
        std::slice::from_ref(&replay),
        LossMask::CleanOnly,
        &cfg,
        1,
        &DEFAULT_SELECTION,
    )
    .unwrap();
    assert_eq!(g, anchor);
}

#[test]
fn replay_must_follow_checkpoint() {
    let cfg = tiny_cfg();
    let p = init_policy(cfg.dims(&tiny_task()), 5).unwrap();
    let replay = one_step_replay(&cfg, &p, 4);
    let start = ckpt(p, 0);
    let err = subgroup_gradient(
        &start,
        std::slice::from_ref(&replay),
        LossMask::CleanOnly,
        &cfg,
        1,
        &DEFAULT_SELECTION,
    );
    assert!(matches!(err, Err(Error::Validation(_))));
    assert!(subgroup_gradient(&start, &[], LossMask::CleanOnly, &cfg, 1, &DEFAULT_SELECTION).is_err());
}
