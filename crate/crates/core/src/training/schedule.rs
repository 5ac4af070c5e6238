use crate::config::TrainConfig;
use crate::error::{invalid, Result};

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

/// Learning rate and weight decay at `step` (`0..=total_steps`).
///
/// Three linear segments: warmup `0 → peak` over `warmup_steps`, phase one
/// `peak → phase1_end` up to the midpoint, then phase two restarting at
/// `phase2_start` (reached at the midpoint, first used at `midpoint + 1`)
/// and decaying to `final_lr`. Weight decay is `wd_phase1` up to and
/// including the midpoint, `wd_phase2` after.
pub fn two_phase_schedule(step: usize, cfg: &TrainConfig) -> Result<(f64, f64)> {
    if step > cfg.total_steps {
        return Err(invalid(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    let mid = cfg.midpoint();
    let lr = if step <= cfg.warmup_steps {
        if cfg.warmup_steps == 0 {
            cfg.peak_lr
        } else {
            cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
        }
    } else if step <= mid {
        lerp(cfg.peak_lr, cfg.phase1_end_lr, (step - cfg.warmup_steps) as f64 / (mid - cfg.warmup_steps) as f64)
    } else {
        lerp(cfg.phase2_start_lr, cfg.final_lr, (step - mid) as f64 / (cfg.total_steps - mid) as f64)
    };
    let wd = if step <= mid { cfg.wd_phase1 } else { cfg.wd_phase2 };
    Ok((lr, wd))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig { total_steps: 100, warmup_steps: 10, peak_lr: 1.0, phase1_end_lr: 0.5, phase2_start_lr: 0.1, final_lr: 0.01, ..TrainConfig::default() }
    }

    #[test]
    fn anchor_points() {
        let c = cfg();
        assert_eq!(two_phase_schedule(0, &c).unwrap(), (0.0, 0.1));
        assert_eq!(two_phase_schedule(10, &c).unwrap(), (1.0, 0.1));
        assert_eq!(two_phase_schedule(50, &c).unwrap(), (0.5, 0.1));
        let (lr, wd) = two_phase_schedule(51, &c).unwrap();
        assert!((lr - (0.1 - 0.09 / 50.0)).abs() < 1e-15);
        assert_eq!(wd, 0.0);
        assert_eq!(two_phase_schedule(100, &c).unwrap().0, 0.01);
        assert!(two_phase_schedule(101, &c).is_err());
    }

    #[test]
    fn continuous_except_at_midpoint() {
        let c = cfg();
        let lrs: Vec<f64> = (0..=100).map(|s| two_phase_schedule(s, &c).unwrap().0).collect();
        for s in 1..=100 {
            let jump = (lrs[s] - lrs[s - 1]).abs();
            if s == 51 {
                assert!(jump > 0.3);
            } else {
                assert!(jump <= 0.1 + 1e-12, "step {s}");
            }
        }
    }
}
