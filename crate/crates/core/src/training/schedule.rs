use crate::error::{Error, Result};

/// Linear warm-up from 0 to `peak` over the first `⌈warmup_frac · total⌉`
/// steps, then linear decay to 0 at `total`.
pub fn lr_schedule(step: u64, total: u64, peak: f64, warmup_frac: f64) -> Result<f64> {
    if step > total {
        return Err(Error::invalid(format!("lr_schedule: step {step} beyond total {total}")));
    }
    if !(0.0..1.0).contains(&warmup_frac) {
        return Err(Error::invalid(format!("warmup fraction {warmup_frac} outside [0, 1)")));
    }
    // The small slack keeps representation error from adding a step.
    let warmup = (warmup_frac * total as f64 - 1e-9).ceil().max(0.0) as u64;
    Ok(if step < warmup {
        peak * (step as f64 / warmup as f64)
    } else if total == warmup {
        peak
    } else {
        peak * ((total - step) as f64 / (total - warmup) as f64)
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn schedule_examples() {
        let lr = |s| lr_schedule(s, 100_000, 5e-5, 0.1).unwrap();
        assert_eq!(lr(0), 0.0);
        assert_eq!(lr(10_000), 5e-5);
        assert_eq!(lr(55_000), 0.5 * 5e-5);
        assert_eq!(lr(100_000), 0.0);
        assert!(lr_schedule(100_001, 100_000, 5e-5, 0.1).is_err());
        assert_eq!(lr_schedule(0, 0, 1.0, 0.1).unwrap(), 1.0);
        assert_eq!(lr_schedule(0, 10, 1.0, 0.0).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn schedule_is_bounded_and_unimodal(total in 1u64..5000, frac in 0.0f64..0.9, peak in 1e-6f64..1.0) {
            let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, peak, frac).unwrap()).collect();
            prop_assert!(lrs.iter().all(|&x| (0.0..=peak).contains(&x)));
            let top = lrs.iter().position(|&x| x == peak).unwrap();
            prop_assert!(lrs[..=top].windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(lrs[top..].windows(2).all(|w| w[0] >= w[1]));
        }
    }
}
