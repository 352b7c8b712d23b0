//! Minimal end-to-end recovery of a synthetic clustered-support image.

use amrf_core::adaptive::{adaptive_mrf_recover, OuterOptions};
use amrf_core::bench::{gen_synthetic_structured_2d, psnr};
use amrf_core::mrf::NeighborhoodSpec;
use amrf_core::sensing::{add_noise_snr, SensingMatrix};

fn main() -> amrf_core::Result<()> {
    let a = SensingMatrix::bernoulli(77, 256, 1)?;
    let x = gen_synthetic_structured_2d(16, 16, 26, 3, 1.0, 2)?;
    let y = add_noise_snr(&a.measure(&x)?, 30.0, 3)?;

    let opts = OuterOptions::new(NeighborhoodSpec::Grid8 {
        height: 16,
        width: 16,
    });
    let out = adaptive_mrf_recover(&a, &y.y, &opts, None)?;
    println!("PSNR: {:.2} dB", psnr(&x, &out.x, x.amax())?);
    Ok(())
}
