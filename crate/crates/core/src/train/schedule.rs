use std::f64::consts::PI;

/// Linear warmup to the base rate, then half-cosine down to
/// `floor_frac * base`. Rates are returned as multipliers of the base.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub floor_frac: f64,
}

impl CosineSchedule {
    pub fn new(total_steps: usize, warmup_frac: f64, floor_frac: f64) -> Self {
        let warmup_steps = ((warmup_frac * total_steps as f64).round() as usize).clamp(1, total_steps.max(1));
        Self { warmup_steps, total_steps, floor_frac }
    }

    pub fn factor(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return 1.0;
        }
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.floor_frac + (1.0 - self.floor_frac) * 0.5 * (1.0 + (PI * t).cos())
    }

    pub fn lr(&self, base: f64, step: usize) -> f64 {
        base * self.factor(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn landmarks() {
        let s = CosineSchedule::new(200, 0.15, 0.01);
        assert_eq!(s.warmup_steps, 30);
        assert_eq!(s.lr(1e-4, 0), 1e-4 / 30.0);
        assert_eq!(s.lr(1e-4, 30), 1e-4);
        assert!((s.lr(1e-4, 200) - 1e-6).abs() < 1e-20);
        let mid = 30 + 85;
        assert!((s.lr(1e-4, mid) - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn monotone_after_warmup(total in 2usize..500, frac in 0.0f64..0.5) {
            let s = CosineSchedule::new(total, frac, 0.01);
            for k in s.warmup_steps..total {
                prop_assert!(s.factor(k + 1) <= s.factor(k));
            }
            for k in 0..s.warmup_steps {
                prop_assert!(s.factor(k) <= 1.0 && s.factor(k) > 0.0);
            }
        }
    }
}
