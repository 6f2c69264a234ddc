/// Linear warm-up from 0 to `peak` over `warmup` epochs, then linear decay
/// to `peak / 2` at epoch `total`. Epochs past `total` keep the final value;
/// fractional epochs interpolate.
pub fn lr_schedule(epoch: f64, peak: f64, warmup: f64, total: f64) -> f64 {
    let epoch = epoch.max(0.0);
    if epoch >= total {
        return peak / 2.0;
    }
    if epoch < warmup {
        return peak * epoch / warmup;
    }
    peak * (1.0 - 0.5 * (epoch - warmup) / (total - warmup))
}
