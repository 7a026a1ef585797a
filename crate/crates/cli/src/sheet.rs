//! Image tiling for filmstrips and sweep contact sheets.

use image::{Rgb, RgbImage};

pub const GUTTER: u32 = 4;
const BACKDROP: Rgb<u8> = Rgb([255, 255, 255]);

/// Lays `tiles` out row-major in `columns` columns, separated and framed by
/// `gutter` pixels. Cells take the largest tile size; smaller tiles sit in
/// the top-left of their cell.
pub fn tile(tiles: &[RgbImage], columns: usize, gutter: u32) -> RgbImage {
    if tiles.is_empty() {
        return RgbImage::from_pixel(1, 1, BACKDROP);
    }
    let columns = columns.clamp(1, tiles.len()) as u32;
    let rows = (tiles.len() as u32).div_ceil(columns);
    let cell_w = tiles.iter().map(RgbImage::width).max().unwrap_or(0);
    let cell_h = tiles.iter().map(RgbImage::height).max().unwrap_or(0);
    let width = columns * cell_w + (columns + 1) * gutter;
    let height = rows * cell_h + (rows + 1) * gutter;
    let mut sheet = RgbImage::from_pixel(width, height, BACKDROP);
    for (i, t) in tiles.iter().enumerate() {
        let (c, r) = (i as u32 % columns, i as u32 / columns);
        let x = gutter + c * (cell_w + gutter);
        let y = gutter + r * (cell_h + gutter);
        image::imageops::replace(&mut sheet, t, x as i64, y as i64);
    }
    sheet
}

/// One row, in order.
pub fn filmstrip(frames: &[RgbImage]) -> RgbImage {
    tile(frames, frames.len(), GUTTER)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_geometry() {
        let tiles: Vec<RgbImage> = (0..5).map(|i| RgbImage::from_pixel(10, 6, Rgb([i * 40, 0, 0]))).collect();
        let sheet = tile(&tiles, 3, 2);
        assert_eq!(sheet.dimensions(), (3 * 10 + 4 * 2, 2 * 6 + 3 * 2));
        assert_eq!(sheet.get_pixel(2, 2), &Rgb([0, 0, 0]));
        assert_eq!(sheet.get_pixel(2 + 12, 2), &Rgb([40, 0, 0]));
        assert_eq!(sheet.get_pixel(2 + 12, 2 + 8), &Rgb([160, 0, 0]));
        assert_eq!(sheet.get_pixel(0, 0), &BACKDROP);
        assert_eq!(sheet.get_pixel(sheet.width() - 3, sheet.height() - 3), &BACKDROP);
    }

    #[test]
    fn filmstrip_is_one_row() {
        let frames = vec![RgbImage::new(8, 8); 4];
        assert_eq!(filmstrip(&frames).dimensions(), (4 * 8 + 5 * GUTTER, 8 + 2 * GUTTER));
    }
}
