use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (warmup, total) = (cfg.warmup_steps, cfg.total_steps);
    if step < warmup {
        return cfg.base_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn anchor_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(500, &cfg), 0.0025);
        assert_eq!(lr_at(1000, &cfg), 0.005);
        assert_eq!(lr_at(cfg.total_steps, &cfg), 0.0);
        let mid = (cfg.warmup_steps + cfg.total_steps) / 2;
        assert!((lr_at(mid, &cfg) - 0.0025).abs() < 1e-15);
    }

    #[test]
    fn no_warmup_starts_at_base() {
        let cfg = TrainConfig { warmup_steps: 0, total_steps: 10, ..Default::default() };
        assert_eq!(lr_at(0, &cfg), cfg.base_lr);
        let all = TrainConfig { warmup_steps: 10, total_steps: 10, ..Default::default() };
        assert_eq!(lr_at(10, &all), 0.0);
    }

    proptest! {
        #[test]
        fn non_increasing_after_warmup(warmup in 0usize..50, extra in 1usize..200) {
            let cfg = TrainConfig { warmup_steps: warmup, total_steps: warmup + extra, ..Default::default() };
            let mut prev = lr_at(warmup, &cfg);
            prop_assert!(prev <= cfg.base_lr);
            for s in warmup + 1..=cfg.total_steps {
                let lr = lr_at(s, &cfg);
                prop_assert!(lr <= prev && lr >= 0.0);
                prev = lr;
            }
            if warmup > 0 {
                let before = lr_at(warmup - 1, &cfg);
                prop_assert!((cfg.base_lr - before - cfg.base_lr / warmup as f64).abs() < 1e-12);
            }
        }
    }
}
