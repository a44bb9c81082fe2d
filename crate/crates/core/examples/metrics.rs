//! Pixel metrics on a few synthetic pairs, plus the embedding cosine.

use removal_engine::metrics::{embed_cosine, psnr, ssim};
use removal_engine::raster::Image;

fn texture(w: usize, h: usize) -> Image {
    let data = (0..w * h * 3)
        .map(|i| ((i * 37 + i / 7 * 11) % 256) as u8)
        .collect();
    Image::new(w, h, data).unwrap()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let a = texture(32, 32);
    let brighter = Image::new(
        32,
        32,
        a.data().iter().map(|v| v.saturating_add(16)).collect(),
    )?;
    let inverted = Image::new(32, 32, a.data().iter().map(|v| 255 - v).collect())?;
    let gray = |v| Image::filled(32, 32, [v, v, v]);

    println!(
        "identical      psnr {:>8.4} ssim {:.6}",
        psnr(&a, &a)?,
        ssim(&a, &a)?
    );
    println!(
        "+16 saturating psnr {:>8.4} ssim {:.6}",
        psnr(&a, &brighter)?,
        ssim(&a, &brighter)?
    );
    println!(
        "inverted       psnr {:>8.4} ssim {:.6}",
        psnr(&a, &inverted)?,
        ssim(&a, &inverted)?
    );
    println!(
        "flat 100 / 200 psnr {:>8.4} ssim {:.6}",
        psnr(&gray(100)?, &gray(200)?)?,
        ssim(&gray(100)?, &gray(200)?)?
    );
    println!(
        "cosine (1,2,2)·(2,1,2) = {:.6}",
        embed_cosine(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0])?
    );
    Ok(())
}
