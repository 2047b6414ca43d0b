use rand::Rng;

use super::{CorruptionPlan, StackSet};
use crate::layout::TokenSequence;
use crate::{Error, Result};

/// Apply a corruption plan. Selected tokens are resampled from
/// `q(x_t | x_0)` and lose their condition flag; the rest become precise
/// conditions. Tokens that are already MASK stay MASK.
pub fn corrupt<R: Rng + ?Sized>(
    seq: &TokenSequence,
    plan: &CorruptionPlan,
    stacks: &StackSet,
    rng: &mut R,
) -> Result<TokenSequence> {
    if plan.len() != seq.len() {
        return Err(Error::Shape(format!(
            "plan has {} entries for {} tokens",
            plan.len(),
            seq.len()
        )));
    }
    let mut out = seq.clone();
    for (tok, entry) in out.tokens.iter_mut().zip(&plan.entries) {
        if !entry.selected {
            tok.flag = true;
            continue;
        }
        let stack = stacks.get(tok.kind);
        if (tok.value as usize) < stack.k() {
            tok.value = stack.sample_forward(tok.value as usize, entry.t, rng)? as u32;
        }
        tok.flag = false;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{NoiseAssignment, PlanEntry, Schedule};
    use crate::layout::{tokenize, CanvasSpec, Element, Layout, QuantizerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(n: usize) -> (TokenSequence, QuantizerConfig) {
        let cfg = QuantizerConfig::new(4, 16).unwrap();
        let elements = (0..n as u32)
            .map(|i| Element::precise(i % 4, (3 * i) % 16, (5 * i) % 16, 1 + i % 7, 2 + i % 5))
            .collect();
        let layout = Layout::new(CanvasSpec::new(64, 64).unwrap(), elements);
        (tokenize(&layout, &cfg), cfg)
    }

    #[test]
    fn empty_plan_leaves_values_and_flags_precise() {
        let (seq, cfg) = fixture(4);
        let stacks = StackSet::build(&NoiseAssignment::default(), &Schedule::with_steps(10), &cfg).unwrap();
        let plan = CorruptionPlan {
            entries: vec![PlanEntry::default(); seq.len()],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = corrupt(&seq, &plan, &stacks, &mut rng).unwrap();
        assert_eq!(out.tokens, seq.tokens);
        assert!(out.tokens.iter().all(|t| t.flag));
    }

    #[test]
    fn heavy_mask_schedule_masks_most_tokens() {
        let (seq, cfg) = fixture(20);
        let sched = Schedule {
            t_max: 10,
            gamma_end: 0.9,
            ..Schedule::default()
        };
        let stacks = StackSet::build(&NoiseAssignment::default(), &sched, &cfg).unwrap();
        let plan = CorruptionPlan::uniform(seq.len(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut masked = 0;
        let mut total = 0;
        while total < 10_000 {
            let out = corrupt(&seq, &plan, &stacks, &mut rng).unwrap();
            for t in &out.tokens {
                masked += usize::from(t.value == cfg.mask(t.kind));
                total += 1;
                assert!(!t.flag);
            }
        }
        assert!(masked as f64 / total as f64 >= 0.8, "{masked}/{total}");
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        let (seq, cfg) = fixture(2);
        let stacks = StackSet::build(&NoiseAssignment::default(), &Schedule::with_steps(5), &cfg).unwrap();
        let plan = CorruptionPlan::uniform(3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(corrupt(&seq, &plan, &stacks, &mut rng), Err(Error::Shape(_))));
    }
}
