//! Epoch-indexed topology-loss weight and learning rate.

use super::config::LossConfig;

/// `λ(t) = λ_base · min(1, t / ramp)`.
pub fn lambda(epoch: usize, config: &LossConfig) -> f64 {
    if config.lambda_ramp_epochs == 0 {
        return config.lambda_base;
    }
    config.lambda_base * (epoch as f64 / config.lambda_ramp_epochs as f64).min(1.0)
}

/// Linear warm-up from 0, then multi-step decay.
pub fn lr_schedule(epoch: usize, config: &LossConfig) -> f64 {
    if epoch < config.warmup_epochs {
        return config.lr_base * epoch as f64 / config.warmup_epochs as f64;
    }
    let decays = config.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    // dividing by 1/factor keeps decade decays exact (0.05 → 0.005, not 0.005000000000000001)
    config.lr_base / (1.0 / config.decay_factor).powi(decays as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_ramps_then_holds() {
        let c = LossConfig::default();
        assert_eq!(lambda(0, &c), 0.0);
        assert_eq!(lambda(5, &c), 0.2);
        assert_eq!(lambda(100, &c), 0.2);
    }

    #[test]
    fn lr_warmup_and_decay() {
        let c = LossConfig::default();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(10, &c), 0.05);
        assert_eq!(lr_schedule(40, &c), 0.005);
        assert_eq!(lr_schedule(60, &c), 0.0005);
    }
}
