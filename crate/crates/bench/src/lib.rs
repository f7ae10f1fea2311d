//! Inputs shared by the benchmarks.

use std::collections::BTreeSet;

use layercraft_core::layout::{
    BackgroundSpec, CanvasSpec, ObjectSpec, Rect, RelationKind, ScenePlan,
};
use layercraft_core::oin::{
    Block, LoraDelta, Matrix, MixConfig, ProjectionWeights, QkvDelta, TokenSequence,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub struct OinInput {
    pub text: TokenSequence,
    pub noisy: TokenSequence,
    pub background: TokenSequence,
    pub object: TokenSequence,
    pub weights: ProjectionWeights,
    pub config: MixConfig,
}

fn matrix(rng: &mut StdRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn delta(rng: &mut StdRng, d: usize, rank: usize) -> QkvDelta {
    let mut one = || Some(LoraDelta::new(matrix(rng, rank, d), matrix(rng, d, rank)).unwrap());
    QkvDelta {
        q: one(),
        k: one(),
        v: one(),
    }
}

/// `tokens` noisy tokens of width `d`, with text and condition blocks a
/// quarter of that length and rank-4 deltas everywhere.
pub fn oin_input(tokens: usize, d: usize) -> OinInput {
    let mut rng = StdRng::seed_from_u64(7);
    let side = (tokens / 4).max(1);
    let mut weights = ProjectionWeights::new(
        matrix(&mut rng, d, d),
        matrix(&mut rng, d, d),
        matrix(&mut rng, d, d),
    )
    .unwrap();
    weights.both = delta(&mut rng, d, 4);
    weights.inp = delta(&mut rng, d, 4);
    weights.obj = delta(&mut rng, d, 4);
    OinInput {
        text: TokenSequence::new(Block::Text, matrix(&mut rng, side, d)).unwrap(),
        noisy: TokenSequence::new(Block::Noisy, matrix(&mut rng, tokens, d)).unwrap(),
        background: TokenSequence::new(Block::BgCond, matrix(&mut rng, side, d)).unwrap(),
        object: TokenSequence::new(Block::ObjCond, matrix(&mut rng, side, d)).unwrap(),
        weights,
        config: MixConfig {
            d,
            d_out: d,
            token_mask: (0..tokens).step_by(3).collect::<BTreeSet<_>>(),
        },
    }
}

/// A plan with `n` objects and a sprinkling of support relations.
pub fn scene(n: usize, canvas: CanvasSpec) -> ScenePlan {
    let mut rng = StdRng::seed_from_u64(11);
    let mut plan = ScenePlan::new(BackgroundSpec::new("an empty hall"), canvas);
    for i in 0..n {
        let x0 = rng.gen_range(0..canvas.width as i64 - 20);
        let y0 = rng.gen_range(0..canvas.height as i64 - 20);
        let rect = Rect::new(
            x0,
            y0,
            x0 + rng.gen_range(10..=20),
            y0 + rng.gen_range(10..=20),
        );
        let mut obj = ObjectSpec::new(format!("object {i:03}"), format!("object number {i}"), rect)
            .with_order(i as u32 + 1);
        if i > 0 && i % 5 == 0 {
            obj = obj.with_relation(RelationKind::OnTopOf, format!("object {:03}", i - 1));
        }
        plan.objects.push(obj);
    }
    plan
}
