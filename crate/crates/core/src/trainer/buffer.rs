use rand::Rng;

use crate::error::{Result, SdqlError};
use crate::staged_mdp::{SdqlRng, Transition};

/// Fixed-capacity ring of transitions belonging to a single stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    stage: usize,
    capacity: usize,
    items: Vec<Transition>,
    /// Slot overwritten by the next push once the ring is full.
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(stage: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(SdqlError::InvalidConfig("trainer.buffer_capacity must be positive".into()));
        }
        Ok(Self {
            stage,
            capacity,
            items: Vec::new(),
            cursor: 0,
        })
    }

    /// Rebuilds a buffer from its serialized parts.
    pub fn from_parts(stage: usize, capacity: usize, items: Vec<Transition>, cursor: usize) -> Result<Self> {
        let mut b = Self::new(stage, capacity)?;
        if items.len() > capacity || cursor >= capacity.max(1) || (items.len() < capacity && cursor != 0) {
            return Err(SdqlError::Format(format!(
                "buffer of stage {stage}: {} items, cursor {cursor}, capacity {capacity}",
                items.len()
            )));
        }
        if let Some(t) = items.iter().find(|t| t.stage != stage) {
            return Err(SdqlError::Format(format!(
                "buffer of stage {stage} holds a stage-{} transition",
                t.stage
            )));
        }
        b.items = items;
        b.cursor = cursor;
        Ok(b)
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Transition] {
        &self.items
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.stage != self.stage {
            return Err(SdqlError::StageViolation {
                from: self.stage,
                to: t.stage,
            });
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample(&self, n: usize, rng: &mut SdqlRng) -> Vec<&Transition> {
        (0..n)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::staged_mdp::Action;
    use rand::SeedableRng;

    fn tr(stage: usize, reward: f64) -> Transition {
        Transition {
            state_obs: vec![reward],
            action: Action::Discrete(0),
            reward,
            next_state_obs: vec![0.0],
            terminal: false,
            stage_transitioned: false,
            stage,
        }
    }

    #[test]
    fn rejects_foreign_stage() {
        let mut b = ReplayBuffer::new(2, 4).unwrap();
        assert!(matches!(b.push(tr(1, 0.0)), Err(SdqlError::StageViolation { from: 2, to: 1 })));
        assert!(b.is_empty());
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut b = ReplayBuffer::new(1, 3).unwrap();
        for i in 0..5 {
            b.push(tr(1, i as f64)).unwrap();
        }
        assert_eq!(b.len(), 3);
        let rewards: Vec<f64> = b.items().iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 2.0]);
        assert_eq!(b.cursor(), 2);
        let again = ReplayBuffer::from_parts(1, 3, b.items().to_vec(), b.cursor()).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(1, 4).unwrap();
        for i in 0..4 {
            b.push(tr(1, i as f64)).unwrap();
        }
        let mut rng = SdqlRng::seed_from_u64(3);
        let mut counts = [0usize; 4];
        for t in b.sample(8000, &mut rng) {
            counts[t.reward as usize] += 1;
        }
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - 2000.0).powi(2) / 2000.0).sum();
        // 3 degrees of freedom: P(X > 11.34) = 0.01
        assert!(chi2 < 11.34, "{counts:?}");
    }
}
