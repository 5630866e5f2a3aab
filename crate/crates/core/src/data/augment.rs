use rand::Rng;

pub const AUGMENT_PAD: i64 = 4;

/// One draw of the training augmentation: a crop offset into the zero-padded
/// image (0 = centred) and an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentChoice {
    pub dy: i64,
    pub dx: i64,
    pub flip: bool,
}

impl AugmentChoice {
    pub const IDENTITY: AugmentChoice = AugmentChoice { dy: 0, dx: 0, flip: false };

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let dy = rng.random_range(-AUGMENT_PAD..=AUGMENT_PAD);
        let dx = rng.random_range(-AUGMENT_PAD..=AUGMENT_PAD);
        let flip = rng.random_bool(0.5);
        Self { dy, dx, flip }
    }

    /// Applies the crop then the flip to one `[c, h, w]` image.
    pub fn apply(&self, image: &[f64], shape: (usize, usize, usize)) -> Vec<f64> {
        let (c, h, w) = shape;
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &image[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let sy = y as i64 + self.dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w {
                    let sx = x as i64 + self.dx;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let ox = if self.flip { w - 1 - x } else { x };
                    out[ch * h * w + y * w + ox] = plane[sy as usize * w + sx as usize];
                }
            }
        }
        out
    }
}

/// Pad-4 random crop plus a horizontal flip with probability 0.5.
pub fn augment<R: Rng + ?Sized>(image: &[f64], shape: (usize, usize, usize), rng: &mut R) -> Vec<f64> {
    AugmentChoice::draw(rng).apply(image, shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image() -> Vec<f64> {
        (0..2 * 3 * 4).map(|i| i as f64).collect()
    }

    #[test]
    fn zero_offset_without_flip_is_identity() {
        assert_eq!(AugmentChoice::IDENTITY.apply(&image(), (2, 3, 4)), image());
    }

    #[test]
    fn double_flip_is_identity() {
        let flip = AugmentChoice {
            flip: true,
            ..AugmentChoice::IDENTITY
        };
        let once = flip.apply(&image(), (2, 3, 4));
        assert_ne!(once, image());
        assert_eq!(flip.apply(&once, (2, 3, 4)), image());
    }

    #[test]
    fn flipped_rows_are_reversed() {
        let flip = AugmentChoice {
            flip: true,
            ..AugmentChoice::IDENTITY
        };
        let out = flip.apply(&image(), (2, 3, 4));
        for (src, dst) in image().chunks(4).zip(out.chunks(4)) {
            let mut rev = src.to_vec();
            rev.reverse();
            assert_eq!(rev, dst);
        }
    }

    #[test]
    fn shift_moves_content_and_fills_zeros() {
        let down = AugmentChoice {
            dy: -1,
            dx: 0,
            flip: false,
        };
        let out = down.apply(&image(), (1, 3, 4));
        assert_eq!(&out[..4], &[0.0; 4]);
        assert_eq!(&out[4..], &image()[..8]);
    }

    #[test]
    fn draws_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let c = AugmentChoice::draw(&mut rng);
            assert!(c.dy.abs() <= AUGMENT_PAD && c.dx.abs() <= AUGMENT_PAD);
        }
        assert_eq!(augment(&image(), (2, 3, 4), &mut rng).len(), image().len());
    }
}
