//! Training augmentation: reflection padding, random crop, random flip.

use rand::Rng;

use crate::data::CHANNELS;

pub const PAD: usize = 4;

/// Index into a reflected axis of length `n` (mirror without repeating the
/// edge pixel), for `i` in `[-n+1, 2n-2]`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r as usize
}

/// Crops the reflection-padded image at offset `(dy, dx)` in `[0, 2·PAD]`
/// and optionally mirrors it left to right. Offset `(PAD, PAD)` without a
/// flip returns the input.
pub fn augment_with(image: &[f32], side: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    assert!(dy <= 2 * PAD && dx <= 2 * PAD, "crop offset out of range");
    assert!(side > PAD, "image too small for reflection padding");
    let plane = side * side;
    let mut out = vec![0.0f32; CHANNELS * plane];
    for c in 0..CHANNELS {
        let src = &image[c * plane..(c + 1) * plane];
        for i in 0..side {
            let si = reflect_index(i as isize + dy as isize - PAD as isize, side);
            for j in 0..side {
                let jj = if flip { side - 1 - j } else { j };
                let sj = reflect_index(jj as isize + dx as isize - PAD as isize, side);
                out[c * plane + i * side + j] = src[si * side + sj];
            }
        }
    }
    out
}

/// Random crop from the reflection-padded image plus a horizontal flip with
/// probability 1/2.
pub fn augment<R: Rng + ?Sized>(image: &[f32], side: usize, rng: &mut R) -> Vec<f32> {
    let dy = rng.random_range(0..=2 * PAD);
    let dx = rng.random_range(0..=2 * PAD);
    let flip = rng.random::<bool>();
    augment_with(image, side, dy, dx, flip)
}
