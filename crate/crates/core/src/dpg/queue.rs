use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Param, Tensor};

/// Which previous stage token leaves a full queue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Oldest stage index.
    #[default]
    Fifo,
    /// Most recently added previous token; the earliest tokens survive.
    Filo,
    /// Uniformly random previous token, drawn from the queue's own generator.
    Random,
}

#[derive(Clone, Debug)]
pub struct StageToken {
    pub stage: usize,
    pub token: Param,
    pub frozen: bool,
}

/// Bounded set of learnable stage tokens.
///
/// A capacity of zero disables stage tokens entirely.
#[derive(Clone, Debug)]
pub struct StageTokenQueue {
    tokens: Vec<StageToken>,
    capacity: usize,
    policy: EvictionPolicy,
    width: usize,
    rng: ChaCha8Rng,
}

/// Serializable form of the queue layout and generator position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueState {
    pub stages: Vec<usize>,
    pub frozen: Vec<bool>,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

pub fn token_name(stage: usize) -> String {
    format!("queue.stage_{stage}")
}

impl StageTokenQueue {
    pub fn new(capacity: usize, policy: EvictionPolicy, width: usize, seed: u64) -> Self {
        Self {
            tokens: Vec::with_capacity(capacity + 1),
            capacity,
            policy,
            width,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn policy(&self) -> EvictionPolicy {
        self.policy
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[StageToken] {
        &self.tokens
    }

    pub fn tokens_mut(&mut self) -> &mut [StageToken] {
        &mut self.tokens
    }

    pub fn stages(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.stage).collect()
    }

    /// Freezes the current token, inserts a trainable token for
    /// `new_stage` and, when over capacity, evicts one previous token.
    /// Returns the evicted stage index.
    pub fn advance(&mut self, new_stage: usize, init: Tensor) -> Result<Option<usize>> {
        if let Some(last) = self.tokens.iter().map(|t| t.stage).max() {
            if new_stage <= last {
                return Err(Error::StageOrder {
                    last,
                    got: new_stage,
                });
            }
        }
        if init.shape() != [1, self.width] {
            return Err(Error::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "stage token",
                lhs: init.shape().to_vec(),
                rhs: vec![1, self.width],
            }));
        }
        if self.capacity == 0 {
            return Ok(None);
        }
        for t in &mut self.tokens {
            t.frozen = true;
        }
        self.tokens.push(StageToken {
            stage: new_stage,
            token: Param::new(token_name(new_stage), init),
            frozen: false,
        });
        if self.tokens.len() <= self.capacity {
            return Ok(None);
        }
        // Previous tokens are every entry but the last, kept in stage order.
        let previous = self.tokens.len() - 1;
        let victim = match self.policy {
            EvictionPolicy::Fifo => 0,
            EvictionPolicy::Filo => previous - 1,
            EvictionPolicy::Random => self.rng.random_range(0..previous),
        };
        Ok(Some(self.tokens.remove(victim).stage))
    }

    /// Marks every token frozen, as during evaluation.
    pub fn freeze_all(&mut self) {
        for t in &mut self.tokens {
            t.frozen = true;
        }
    }

    /// The trainable token, if any.
    pub fn current(&self) -> Option<&StageToken> {
        self.tokens.iter().find(|t| !t.frozen)
    }

    pub fn state(&self) -> QueueState {
        QueueState {
            stages: self.stages(),
            frozen: self.tokens.iter().map(|t| t.frozen).collect(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Rebuilds the layout from `state` with zero-valued tokens; the token
    /// values are filled in by the caller.
    pub fn restore(&mut self, state: &QueueState) -> Result<()> {
        if state.stages.len() != state.frozen.len() || state.stages.len() > self.capacity {
            return Err(Error::Config("inconsistent stage-token queue state".into()));
        }
        self.tokens = state
            .stages
            .iter()
            .zip(&state.frozen)
            .map(|(&stage, &frozen)| StageToken {
                stage,
                token: Param::new(token_name(stage), Tensor::zeros(&[1, self.width])),
                frozen,
            })
            .collect();
        let mut rng = ChaCha8Rng::from_seed(state.rng_seed);
        rng.set_stream(state.rng_stream);
        rng.set_word_pos(state.rng_word_pos);
        self.rng = rng;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(policy: EvictionPolicy, stages: std::ops::RangeInclusive<usize>) -> StageTokenQueue {
        let mut q = StageTokenQueue::new(5, policy, 4, 1);
        for s in stages {
            q.advance(s, Tensor::full(&[1, 4], s as f64)).unwrap();
        }
        q
    }

    #[test]
    fn fifo_and_filo_survivors() {
        assert_eq!(run(EvictionPolicy::Fifo, 1..=7).stages(), vec![3, 4, 5, 6, 7]);
        assert_eq!(run(EvictionPolicy::Filo, 1..=7).stages(), vec![1, 2, 3, 4, 7]);
    }

    #[test]
    fn under_capacity_keeps_all_and_only_newest_trainable() {
        for policy in [EvictionPolicy::Fifo, EvictionPolicy::Filo, EvictionPolicy::Random] {
            let q = run(policy, 1..=5);
            assert_eq!(q.stages(), vec![1, 2, 3, 4, 5]);
            assert_eq!(q.current().unwrap().stage, 5);
            assert_eq!(q.tokens().iter().filter(|t| !t.frozen).count(), 1);
        }
    }

    #[test]
    fn non_monotonic_stage_rejected() {
        let mut q = run(EvictionPolicy::Fifo, 1..=3);
        assert!(matches!(
            q.advance(3, Tensor::zeros(&[1, 4])),
            Err(Error::StageOrder { last: 3, got: 3 })
        ));
    }

    #[test]
    fn zero_capacity_holds_nothing() {
        let mut q = StageTokenQueue::new(0, EvictionPolicy::Fifo, 4, 0);
        q.advance(1, Tensor::zeros(&[1, 4])).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn state_round_trip_continues_random_sequence() {
        let mut a = run(EvictionPolicy::Random, 1..=6);
        let mut b = StageTokenQueue::new(5, EvictionPolicy::Random, 4, 99);
        b.restore(&a.state()).unwrap();
        assert_eq!(a.stages(), b.stages());
        for s in 7..20 {
            assert_eq!(
                a.advance(s, Tensor::zeros(&[1, 4])).unwrap(),
                b.advance(s, Tensor::zeros(&[1, 4])).unwrap()
            );
        }
    }
}
