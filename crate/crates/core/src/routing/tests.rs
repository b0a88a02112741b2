use super::*;
use crate::expert::tests::{gelu_tanh, mat, mm, oracle_forward, softmax_row, Mat};
use crate::expert::{ExpertConfig, ExpertModel};
use crate::numerics::{grad_check, Graph, Parameterized, SeededRng, FD_STEP};

fn cfg(h: usize, v: usize, ctx: usize) -> ExpertConfig {
    ExpertConfig {
        num_layers: 1,
        num_heads: 1,
        hidden_size: h,
        vocab_size: v,
        context_length: ctx,
    }
}

fn gate_cfg(k: usize, d: usize) -> GateConfig {
    GateConfig {
        gate_dim: d,
        experts_per_role: k,
        ..GateConfig::default()
    }
}

/// Random model with every tensor pushed well away from its init scale.
fn random_moe(c: ExpertConfig, gate: GateConfig, seed: u64) -> MoEModel {
    let mut rng = SeededRng::new(seed);
    let mut m = MoEModel::new(c, gate, &mut rng).unwrap();
    m.visit_mut(&mut |_, t| {
        for v in t.values_mut() {
            *v += 0.5 * rng.normal();
        }
    });
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Loop-by-loop mixture: gate rows, argmax within roles, weighted sum of oracle
/// expert hidden states, residual block, head.
fn oracle_moe(m: &MoEModel, tokens: &[usize]) -> Mat {
    let k = m.experts_per_role();
    let h = m.expert_config.hidden_size;
    let hidden: Vec<Vec<Mat>> = m
        .experts
        .iter()
        .map(|grp| grp.iter().map(|e| oracle_forward(e, tokens).0).collect())
        .collect();
    let role = mat(&m.gate.role_matrix);
    let mut y: Mat = Vec::new();
    for (i, &tok) in tokens.iter().enumerate() {
        let x = m.gate_embedding.row(tok);
        let g = softmax_row(&role.iter().map(|w| dot(w, x)).collect::<Vec<_>>());
        let mut yi = vec![0.0; h];
        for r in 0..NUM_ROLES {
            let within = mat(&m.gate.expert_matrices[r]);
            let scores: Vec<f64> = within.iter().map(|w| dot(w, x)).collect();
            let pick = crate::expert::argmax(&scores);
            for j in 0..k {
                let hj = if j == pick { 1.0 } else { 0.0 };
                for d in 0..h {
                    yi[d] += g[r] * hj * hidden[r][j][i][d];
                }
            }
        }
        y.push(yi);
    }
    let mix = &m.mix;
    let mut up = mm(&y, &mat(&mix.ff_up));
    for row in &mut up {
        for (j, v) in row.iter_mut().enumerate() {
            *v = gelu_tanh(*v + mix.ff_up_bias.values()[j]);
        }
    }
    let down = mm(&up, &mat(&mix.ff_down));
    let z: Mat = y
        .iter()
        .zip(&down)
        .map(|(yr, dr)| (0..h).map(|d| yr[d] + dr[d] + mix.ff_down_bias.values()[d]).collect())
        .collect();
    mm(&z, &mat(&mix.head))
}

fn assert_close(logits: &Tensor, oracle: &Mat, tol: f64) {
    for (i, row) in oracle.iter().enumerate() {
        for (a, b) in logits.row(i).iter().zip(row) {
            assert!((a - b).abs() < tol, "row {i}: {a} vs {b}");
        }
    }
}

#[test]
fn tiny_moe_matches_unrolled_oracle() {
    let m = random_moe(cfg(4, 5, 6), gate_cfg(1, 3), 11);
    let tokens = [1, 4, 0, 2, 3, 3];
    let (logits, _) = m.forward(&tokens).unwrap();
    assert_close(&logits, &oracle_moe(&m, &tokens), 1e-10);
}

#[test]
fn two_experts_per_role_match_oracle_with_argmax_routing() {
    let m = random_moe(cfg(8, 7, 6), gate_cfg(2, 4), 12);
    let tokens = [0, 6, 5, 1, 2];
    let (logits, _) = m.forward(&tokens).unwrap();
    assert_close(&logits, &oracle_moe(&m, &tokens), 1e-10);
}

#[test]
fn forced_one_hot_routing_is_the_single_expert_path() {
    let m = random_moe(cfg(8, 16, 6), gate_cfg(2, 4), 13);
    let tokens = [3, 9, 15, 0, 7, 2];
    for (r, j) in [(0, 1), (1, 0), (2, 1)] {
        let mut roles = [0.0; NUM_ROLES];
        roles[r] = 1.0;
        let mut ctrl = RoutingControl {
            force_roles: Some(roles),
            force_experts: Some([j; NUM_ROLES]),
            ..RoutingControl::default()
        };
        let (logits, _) = m.forward_with(&tokens, &mut ctrl).unwrap();

        let (hidden, _) = m.experts[r][j].forward(&tokens).unwrap();
        let mut g = Graph::new();
        let w = m.bind(&mut g);
        let y = g.constant(tokens.len(), 8, hidden.values().to_vec()).unwrap();
        let (_, expect) = m.post_mix(&mut g, &w.mix, y).unwrap();
        for (a, b) in logits.values().iter().zip(g.value(expect)) {
            assert!((a - b).abs() <= 1e-12);
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn perturbing_a_token_leaves_earlier_logits_unchanged() {
    let m = random_moe(cfg(8, 10, 8), gate_cfg(2, 4), 14);
    let a = [1, 2, 3, 4, 5, 6, 7];
    let mut b = a;
    b[4] = 9;
    let (la, _) = m.forward(&a).unwrap();
    let (lb, _) = m.forward(&b).unwrap();
    for t in 0..4 {
        assert_eq!(la.row(t), lb.row(t));
    }
    assert_ne!(la.row(4), lb.row(4));
}

#[test]
fn forward_rejects_bad_tokens() {
    let m = random_moe(cfg(4, 5, 4), gate_cfg(1, 3), 15);
    assert!(m.forward(&[1, 2, 3, 4, 0]).is_err());
    assert!(m.forward(&[1, 5]).is_err());
    assert!(m.forward(&[]).is_err());
}

#[test]
fn forward_is_deterministic_without_noise() {
    let m = random_moe(cfg(8, 10, 8), gate_cfg(2, 4), 16);
    let (a, sa) = m.forward(&[1, 2, 3]).unwrap();
    let (b, sb) = m.forward(&[1, 2, 3]).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(sa, sb);
}

fn lm_batch(seqs: &[Vec<usize>]) -> Vec<Sequence<'_>> {
    seqs.iter().map(|s| Sequence::lm(s)).collect()
}

fn loss_parts(m: &MoEModel, batch: &[Sequence], lambda: f64, ctrl: &mut RoutingControl) -> (f64, f64, f64) {
    let mut g = Graph::new();
    let w = m.bind(&mut g);
    let p = m.loss_bound(&mut g, &w, batch, lambda, ctrl, None).unwrap();
    (g.scalar(p.loss), g.scalar(p.task_loss), g.scalar(p.entropy))
}

#[test]
fn loss_examples() {
    let mut m = random_moe(cfg(8, 10, 8), gate_cfg(1, 4), 17);
    let seqs = vec![vec![1, 2, 3, 4], vec![1, 5, 6, 7, 8, 2]];
    let batch = lm_batch(&seqs);

    let (l, task, _) = loss_parts(&m, &batch, 0.0, &mut RoutingControl::default());
    assert_eq!(l.to_bits(), task.to_bits());
    assert_eq!(moe_loss(&m, &batch, 0.0).unwrap().to_bits(), task.to_bits());

    for lambda in [0.1, 3.0] {
        let mut ctrl = RoutingControl {
            force_roles: Some([0.0, 0.0, 1.0]),
            ..RoutingControl::default()
        };
        let (l, task, ent) = loss_parts(&m, &batch, lambda, &mut ctrl);
        assert_eq!(ent, 0.0);
        assert_eq!(l, task);
    }

    let mut uniform = RoutingControl {
        force_roles: Some([1.0 / 3.0; 3]),
        ..RoutingControl::default()
    };
    let (l, task, _) = loss_parts(&m, &batch, 1.0, &mut uniform);
    assert!((l - (task - 3f64.ln())).abs() < 1e-12);

    // a zero role matrix gives the same uniform gate without forcing
    m.gate.role_matrix.values_mut().iter_mut().for_each(|v| *v = 0.0);
    let (l, task, ent) = loss_parts(&m, &batch, 1.0, &mut RoutingControl::default());
    assert!((ent - 3f64.ln()).abs() < 1e-12);
    assert!((l - (task - 3f64.ln())).abs() < 1e-12);

    m.gate.config.entropy_sign = EntropySign::Literal;
    let (l, task, _) = loss_parts(&m, &batch, 1.0, &mut RoutingControl::default());
    assert!((l - (task + 3f64.ln())).abs() < 1e-12);

    assert!(matches!(moe_loss(&m, &batch, -0.1), Err(crate::Error::Config(_))));
    assert!(moe_loss(&m, &[], 0.1).is_err());
}

fn grad_check_model() -> MoEModel {
    let mut gate = gate_cfg(2, 4);
    gate.straight_through = false;
    let mut m = random_moe(cfg(8, 16, 6), gate, 18);
    // back to moderate scale so softmaxes stay away from saturation
    m.visit_mut(&mut |_, t| t.values_mut().iter_mut().for_each(|v| *v *= 0.5));
    m
}

#[test]
fn moe_loss_passes_grad_check_on_soft_path() {
    let mut m = grad_check_model();
    let seqs = vec![vec![1, 4, 9, 15, 2, 7], vec![3, 3, 12, 0, 8, 11]];
    let err = grad_check(&mut m, FD_STEP, |m, g| {
        let w = m.bind(g);
        let mut rng = SeededRng::new(5);
        let mut ctrl = RoutingControl::train(&mut rng, 0.7);
        let batch = lm_batch(&seqs);
        Ok(m.loss_bound(g, &w, &batch, 0.3, &mut ctrl, None)?.loss)
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn straight_through_sends_gradient_into_selection_matrices() {
    let mut m = grad_check_model();
    m.gate.config.straight_through = true;
    let seqs = vec![vec![1, 4, 9, 15, 2, 7]];
    let batch = lm_batch(&seqs);
    let mut g = Graph::new();
    let w = m.bind(&mut g);
    let mut rng = SeededRng::new(6);
    let mut ctrl = RoutingControl::train(&mut rng, 1.0);
    let parts = m.loss_bound(&mut g, &w, &batch, 0.0, &mut ctrl, None).unwrap();
    g.backward(parts.loss).unwrap();
    for &mv in &w.expert_matrices {
        assert!(g.grad_or_zeros(mv).iter().any(|v| *v != 0.0));
    }
    // noiseless inference gives the selection matrices no gradient
    let mut g = Graph::new();
    let w = m.bind(&mut g);
    let parts = m.loss_bound(&mut g, &w, &batch, 0.0, &mut RoutingControl::default(), None).unwrap();
    g.backward(parts.loss).unwrap();
    for &mv in &w.expert_matrices {
        assert!(g.grad_or_zeros(mv).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn drop_role_renormalizes_remaining_weights() {
    let m = random_moe(cfg(8, 10, 8), gate_cfg(1, 4), 19);
    let tokens = [1, 2, 3, 4, 5];
    let mut g = Graph::new();
    let w = m.bind(&mut g);
    let out = m.forward_bound(&mut g, &w, &tokens, &mut RoutingControl::dropping(Role::Micro)).unwrap();
    for row in g.value(out.role_weights).chunks(NUM_ROLES) {
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    let forced = |drop: Vec<Role>| RoutingControl {
        force_roles: Some([0.5, 0.5, 0.0]),
        drop_roles: drop,
        ..RoutingControl::default()
    };
    let (a, _) = m.forward_with(&tokens, &mut forced(vec![])).unwrap();
    let (b, _) = m.forward_with(&tokens, &mut forced(vec![Role::Quant])).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(m.forward_with(&tokens, &mut forced(Role::ALL.to_vec())).is_err());
    // all mass on the dropped role cannot be renormalized
    let mut ctrl = RoutingControl {
        force_roles: Some([0.0, 0.0, 1.0]),
        drop_roles: vec![Role::Quant],
        ..RoutingControl::default()
    };
    assert!(m.forward_with(&tokens, &mut ctrl).is_err());
}

#[test]
fn routing_stats_contracts() {
    let m = random_moe(cfg(8, 10, 8), gate_cfg(2, 4), 20);
    let tokens = [1, 2, 3, 4, 5, 6, 7];
    let mut ctrl = RoutingControl {
        force_roles: Some([1.0 / 3.0; 3]),
        ..RoutingControl::default()
    };
    let (_, stats) = m.forward_with(&tokens, &mut ctrl).unwrap();
    for r in Role::ALL {
        assert!((stats.role_weight(r) - 1.0 / 3.0).abs() < 1e-12);
    }
    let (_, stats) = m.forward(&tokens).unwrap();
    assert_eq!(stats.tokens, 7);
    assert!((stats.role_weights.values().sum::<f64>() - 1.0).abs() < 1e-9);
    for counts in stats.selection_counts.values() {
        assert_eq!(counts.iter().sum::<usize>(), 7);
    }
    let json = serde_json::to_value(&stats).unwrap();
    for key in ["role_weights", "selection_counts", "mean_entropy", "per_task"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert!(json["role_weights"].get("macro").is_some());
    let back: RoutingStats = serde_json::from_value(json).unwrap();
    assert_eq!(back, stats);
}

#[test]
fn tally_merge_equals_single_tally() {
    let m = random_moe(cfg(8, 10, 8), gate_cfg(2, 4), 21);
    let seqs = [vec![1, 2, 3], vec![4, 5, 6, 7]];
    let mut whole = RoutingTally::new(2);
    let mut parts = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let mut g = Graph::new();
        let w = m.bind(&mut g);
        let out = m.forward_bound(&mut g, &w, s, &mut RoutingControl::default()).unwrap();
        let task = if i == 0 { "a" } else { "b" };
        out.tally(&g, &mut whole, Some(task));
        let mut t = RoutingTally::new(2);
        out.tally(&g, &mut t, Some(task));
        parts.push(t);
    }
    let mut merged = RoutingTally::new(2);
    for p in &parts {
        merged.merge(p);
    }
    let (a, b) = (merged.finish(), whole.finish());
    assert_eq!(a.tokens, b.tokens);
    assert_eq!(a.selection_counts, b.selection_counts);
    assert!((a.mean_entropy - b.mean_entropy).abs() < 1e-12);
    for r in Role::ALL {
        assert!((a.role_weight(r) - b.role_weight(r)).abs() < 1e-12);
    }
    assert_eq!(whole.finish().per_task["b"].tokens, 4);
}

#[test]
fn bind_order_matches_visit_order() {
    let mut m = random_moe(cfg(4, 5, 6), gate_cfg(2, 3), 22);
    let mut g = Graph::new();
    let _ = m.bind(&mut g);
    let leaves: Vec<Vec<f64>> = g.trainable_leaves().iter().map(|&v| g.value(v).to_vec()).collect();
    let params: Vec<Vec<f64>> = m.trainable_mut().iter().map(|t| t.values().to_vec()).collect();
    assert_eq!(leaves, params);
    let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
    assert!(names.contains(&"experts.quant.1.blocks.0.wq".to_string()));
    assert!(names.contains(&"gate.micro".to_string()));
    assert_eq!(names.last().unwrap(), "head");
    // expert output projections are frozen inside the mixture
    for (name, t) in m.named_params() {
        assert_eq!(t.requires_grad(), !name.ends_with(".output"), "{name}");
    }
}

#[test]
fn assemble_checks_expert_groups() {
    let c = cfg(4, 5, 6);
    let mut rng = SeededRng::new(23);
    let mk = |role, idx, rng: &mut SeededRng| ExpertModel::new(c, role, idx, rng).unwrap();
    let experts = vec![mk(Role::Macro, 0, &mut rng), mk(Role::Micro, 0, &mut rng)];
    assert!(MoEModel::assemble(experts, gate_cfg(1, 3), &mut rng).is_err());
    let mut experts: Vec<ExpertModel> = Role::ALL.iter().map(|&r| mk(r, 0, &mut rng)).collect();
    experts[2] = ExpertModel::new(cfg(4, 6, 6), Role::Quant, 0, &mut rng).unwrap();
    assert!(MoEModel::assemble(experts, gate_cfg(1, 3), &mut rng).is_err());
    let experts: Vec<ExpertModel> = Role::ALL.iter().map(|&r| mk(r, 0, &mut rng)).collect();
    let m = MoEModel::assemble(experts.clone(), gate_cfg(1, 3), &mut rng).unwrap();
    let mean: f64 = experts.iter().map(|e| e.weights.output.values()[3]).sum::<f64>() / 3.0;
    assert!((m.mix.head.values()[3] - mean).abs() < 1e-15);
    assert!(MoEModel::assemble(vec![], gate_cfg(1, 3), &mut rng).is_err());
    let mut bad = gate_cfg(1, 3);
    bad.tau = 0.0;
    assert!(MoEModel::assemble(experts, bad, &mut rng).is_err());
}

#[test]
fn untrained_moe_is_near_uniform() {
    let m = MoEModel::new(cfg(8, 20, 8), gate_cfg(1, 4), &mut SeededRng::new(24)).unwrap();
    let loss = moe_loss(&m, &[Sequence::lm(&[1, 5, 9, 13, 2])], 0.0).unwrap();
    assert!((loss - 20f64.ln()).abs() < 0.01, "{loss}");
}
