//! Grayscale image files. PNG and binary PPM (P6) are supported; colour input
//! is reduced to luma, P6 output replicates the gray value over RGB.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, ImageEncoder, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::grid::Grid;

fn format_of(path: &Path) -> Result<ImageFormat> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("ppm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::Image(format!("{}: expected a .png or .ppm file", path.display()))),
    }
}

pub fn from_gray(img: &GrayImage) -> Grid {
    let (w, h) = img.dimensions();
    Grid::from_fn(1, h as usize, w as usize, |_, y, x| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0)
}

/// Clamps to `[0, 1]` and rounds to 8 bits; only the first channel is used.
pub fn to_gray(grid: &Grid) -> GrayImage {
    GrayImage::from_fn(grid.width() as u32, grid.height() as u32, |x, y| {
        Luma([(grid.get(0, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Rounds pixel values to what an 8-bit file would store.
pub fn quantize_8bit(grid: &Grid) -> Grid {
    from_gray(&to_gray(grid))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let format = format_of(path)?;
    let bytes = std::fs::read(path)?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(from_gray(&img.to_luma8()))
}

pub fn encode_image(grid: &Grid, format: ImageFormat) -> Result<Vec<u8>> {
    let gray = to_gray(grid);
    let mut out = Vec::new();
    match format {
        ImageFormat::Png => {
            gray.write_to(&mut std::io::Cursor::new(&mut out), ImageFormat::Png)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        ImageFormat::Pnm => {
            let rgb: Vec<u8> = gray.as_raw().iter().flat_map(|&v| [v, v, v]).collect();
            PnmEncoder::new(&mut out)
                .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
                .write_image(&rgb, gray.width(), gray.height(), image::ExtendedColorType::Rgb8)
                .map_err(|e| Error::Image(e.to_string()))?;
        }
        other => return Err(Error::Image(format!("unsupported format {other:?}"))),
    }
    Ok(out)
}

pub fn write_image(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(grid, format_of(path)?)?;
    std::fs::write(path, bytes)?;
    Ok(())
}
