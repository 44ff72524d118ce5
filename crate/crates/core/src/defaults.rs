//! Numeric defaults shared by the library and the command line. The table is
//! written into every model manifest.

use serde::{Deserialize, Serialize};

/// Screen-size threshold for selective rendering, in pixels.
pub const DEFAULT_GAMMA: f64 = 8.0;
/// Views rendered between two subset rebuilds.
pub const DEFAULT_UPDATE_PERIOD: usize = 50;
/// Weight of the SSIM term in the training loss.
pub const DEFAULT_LAMBDA_SSIM: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Defaults {
    pub gamma: f64,
    pub update_period: usize,
    pub lambda_ssim: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            update_period: DEFAULT_UPDATE_PERIOD,
            lambda_ssim: DEFAULT_LAMBDA_SSIM,
        }
    }
}
