//! PNG grids of generated samples, one row per class, annotated with the
//! teacher's prediction.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::denormalize;
use crate::error::{Error, Result};
use crate::nn::{CondGenInput, ConditionalGenerator, TeacherModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

// 3x5 glyphs, one row per entry, bit 2 is the leftmost column.
fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 3, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        ':' => [0, 2, 0, 2, 0],
        '-' => [0, 0, 7, 0, 0],
        '%' => [5, 1, 2, 4, 5],
        _ => [0; 5],
    }
}

const FONT_SCALE: u32 = 2;
const CHAR_W: u32 = 4 * FONT_SCALE;
const LINE_H: u32 = 6 * FONT_SCALE;

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let rows = glyph(c);
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3u32 {
                if bits & (4 >> col) == 0 {
                    continue;
                }
                for dy in 0..FONT_SCALE {
                    for dx in 0..FONT_SCALE {
                        let x = x0 + i as u32 * CHAR_W + col * FONT_SCALE + dx;
                        let y = y0 + r as u32 * FONT_SCALE + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

/// The teacher's verdict on one tile.
#[derive(Clone, Debug, PartialEq)]
pub struct TileLabel {
    pub class: usize,
    pub predicted: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub rows: usize,
    pub cols: usize,
    pub width: u32,
    pub height: u32,
    /// `tiles[row][col]`
    pub tiles: Vec<Vec<TileLabel>>,
}

/// Renders `samples_per_class` generated images for each class in
/// `classes` and writes them to `path` as a PNG.
pub fn export_sample_grid<T: Scalar>(
    gen: &ConditionalGenerator<T>,
    teacher: &TeacherModel<T>,
    classes: &[usize],
    class_names: &[&str],
    samples_per_class: usize,
    seed: u64,
    path: &Path,
) -> Result<SampleGrid> {
    if classes.is_empty() || samples_per_class == 0 {
        return Err(Error::Contract("grid needs at least one class and one sample per class".into()));
    }
    let k = gen.num_classes();
    if let Some(&bad) = classes.iter().find(|&&c| c >= k) {
        return Err(Error::Contract(format!("class {bad} out of range for {k} classes")));
    }
    let [c, h, w] = gen.config.out_shape;
    if c != 1 && c != 3 {
        return Err(Error::Contract(format!("cannot render {c}-channel images")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes.len() * samples_per_class;
    let labels: Vec<usize> = classes.iter().flat_map(|&c| std::iter::repeat(c).take(samples_per_class)).collect();
    let z: Vec<T> = (0..n * gen.noise_dim())
        .map(|_| T::lit(StandardNormal.sample(&mut rng)))
        .collect();
    let input = CondGenInput {
        z: Tensor::from_vec(&[n, gen.noise_dim()], z)?,
        labels: labels.clone(),
    };
    let images = gen.generate(&input)?;
    let probs = teacher.forward(&images)?.softmax_rows();
    let pixels = denormalize(&images, &gen.normalization);

    let scale = if h < 48 { 2 } else { 1 };
    let (tw, th) = (w as u32 * scale, h as u32 * scale);
    let pad = 4u32;
    let label_w = class_names
        .iter()
        .enumerate()
        .filter(|(i, _)| classes.contains(i))
        .map(|(_, s)| s.chars().count() as u32)
        .max()
        .unwrap_or(2)
        .max(2)
        * CHAR_W
        + 2 * pad;
    let cell_w = tw.max(5 * CHAR_W) + pad;
    let cell_h = th + LINE_H + pad;
    let width = label_w + cell_w * samples_per_class as u32 + pad;
    let height = cell_h * classes.len() as u32 + pad;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);

    let per = c * h * w;
    let mut tiles = Vec::with_capacity(classes.len());
    for (r, &class) in classes.iter().enumerate() {
        let y0 = pad + r as u32 * cell_h;
        let name = class_names.get(class).map(|s| s.to_string()).unwrap_or_else(|| class.to_string());
        draw_text(&mut img, pad, y0 + th / 2 - LINE_H / 2, &name, black);
        let mut row = Vec::with_capacity(samples_per_class);
        for col in 0..samples_per_class {
            let idx = r * samples_per_class + col;
            let x0 = label_w + col as u32 * cell_w;
            let px = &pixels.data()[idx * per..(idx + 1) * per];
            for i in 0..h {
                for j in 0..w {
                    let at = |ch: usize| (px[ch * h * w + i * w + j].as_f64() * 255.0).round() as u8;
                    let rgb = if c == 1 { [at(0); 3] } else { [at(0), at(1), at(2)] };
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(x0 + j as u32 * scale + dx, y0 + i as u32 * scale + dy, Rgb(rgb));
                        }
                    }
                }
            }
            let p = &probs.data()[idx * k..(idx + 1) * k];
            let predicted = probs.argmax_rows()[idx];
            let confidence = p[predicted].as_f64();
            let color = if predicted == class { Rgb([0, 120, 0]) } else { Rgb([200, 0, 0]) };
            let caption = format!("{predicted} {:.0}%", confidence * 100.0);
            draw_text(&mut img, x0, y0 + th + FONT_SCALE, &caption, color);
            row.push(TileLabel {
                class,
                predicted,
                confidence,
            });
        }
        tiles.push(row);
    }
    img.save(path).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    Ok(SampleGrid {
        rows: classes.len(),
        cols: samples_per_class,
        width,
        height,
        tiles,
    })
}
