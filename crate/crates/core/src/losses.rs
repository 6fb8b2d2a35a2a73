//! Multi-scale least-squares adversarial losses.
//!
//! A discriminator emits one score map per scale. Each map is reduced by its
//! mean, and the per-scale terms are summed.

use crate::error::{Error, Result};
use crate::image::RgbImage;

/// Number of discriminator scales used by default.
pub const DEFAULT_SCALES: usize = 5;

/// Rectangular array of discriminator scores, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::domain("score map must be non-empty"));
        }
        if values.len() != rows * cols {
            return Err(Error::domain(format!(
                "{} scores do not fill a {rows}x{cols} map",
                values.len()
            )));
        }
        Ok(ScoreMap { rows, cols, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        ScoreMap::new(rows, cols, vec![value; rows * cols])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn mean_of(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.values.iter().map(|&v| f(v)).sum::<f64>() / self.values.len() as f64
    }
}

/// Ordered per-scale discriminator outputs, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleScores {
    maps: Vec<ScoreMap>,
}

impl ScaleScores {
    pub fn new(maps: Vec<ScoreMap>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::domain("at least one scale is required"));
        }
        Ok(ScaleScores { maps })
    }

    /// `scales` copies of a constant `rows × cols` map.
    pub fn uniform(scales: usize, rows: usize, cols: usize, value: f64) -> Result<Self> {
        ScaleScores::new(vec![ScoreMap::filled(rows, cols, value)?; scales])
    }

    pub fn scales(&self) -> usize {
        self.maps.len()
    }

    pub fn maps(&self) -> &[ScoreMap] {
        &self.maps
    }
}

/// `Σ_i mean((D_i − 1)²)`.
pub fn generator_adv_loss(fake: &ScaleScores) -> f64 {
    fake.maps.iter().map(|m| m.mean_of(|s| (s - 1.0) * (s - 1.0))).sum()
}

/// `Σ_i [mean(D_i(fake)²) + mean((D_i(real) − 1)²)]`.
pub fn discriminator_adv_loss(fake: &ScaleScores, real: &ScaleScores) -> Result<f64> {
    if fake.scales() != real.scales() {
        return Err(Error::domain(format!(
            "fake has {} scales, real has {}",
            fake.scales(),
            real.scales()
        )));
    }
    Ok(fake
        .maps
        .iter()
        .zip(&real.maps)
        .map(|(f, r)| f.mean_of(|s| s * s) + r.mean_of(|s| (s - 1.0) * (s - 1.0)))
        .sum())
}

/// Ground truth for scale `i` (1-based): `i − 1` rounds of 2×2 box averaging.
/// An odd trailing row or column is dropped, as in intrinsics scaling.
pub fn downscale_reference(img: &RgbImage, scale: usize) -> Result<RgbImage> {
    if scale == 0 {
        return Err(Error::domain("scale index starts at 1"));
    }
    let mut cur = img.clone();
    for _ in 1..scale {
        let (w, h) = (cur.width() / 2, cur.height() / 2);
        if w == 0 || h == 0 {
            return Err(Error::domain(format!(
                "{}x{} image is too small for scale {scale}",
                img.width(),
                img.height()
            )));
        }
        let mut data = Vec::with_capacity(w as usize * h as usize * 3);
        for y in 0..h {
            for x in 0..w {
                let px = [
                    cur.get(2 * x, 2 * y),
                    cur.get(2 * x + 1, 2 * y),
                    cur.get(2 * x, 2 * y + 1),
                    cur.get(2 * x + 1, 2 * y + 1),
                ];
                for c in 0..3 {
                    let s: f64 = px.iter().map(|p| p[c] as f64).sum();
                    data.push((s / 4.0) as f32);
                }
            }
        }
        cur = RgbImage::from_data(w, h, data)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(values: Vec<f64>) -> ScaleScores {
        let n = values.len();
        ScaleScores::new(vec![ScoreMap::new(1, n, values).unwrap()]).unwrap()
    }

    #[test]
    fn generator_examples() {
        assert_eq!(generator_adv_loss(&ScaleScores::uniform(5, 4, 4, 1.0).unwrap()), 0.0);
        assert!((generator_adv_loss(&single(vec![0.5])) - 0.25).abs() < 1e-12);
        assert!((generator_adv_loss(&ScaleScores::uniform(DEFAULT_SCALES, 3, 2, 0.0).unwrap()) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn discriminator_examples() {
        let zeros = ScaleScores::uniform(3, 2, 2, 0.0).unwrap();
        let ones = ScaleScores::uniform(3, 2, 2, 1.0).unwrap();
        assert_eq!(discriminator_adv_loss(&zeros, &ones).unwrap(), 0.0);
        let ones2 = ScaleScores::uniform(2, 2, 2, 1.0).unwrap();
        assert!((discriminator_adv_loss(&ones2, &ones2).unwrap() - 2.0).abs() < 1e-12);
        let v = discriminator_adv_loss(&single(vec![0.2, 0.4]), &single(vec![0.9])).unwrap();
        assert!((v - 0.11).abs() < 1e-12, "{v}");
        assert!(matches!(discriminator_adv_loss(&zeros, &ones2), Err(Error::Domain(_))));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(ScoreMap::new(0, 3, vec![]).is_err());
        assert!(ScoreMap::new(2, 2, vec![0.0; 3]).is_err());
        assert!(ScaleScores::new(vec![]).is_err());
    }

    #[test]
    fn downscale_examples() {
        let img = RgbImage::from_data(2, 2, vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(downscale_reference(&img, 1).unwrap(), img);
        assert_eq!(downscale_reference(&img, 2).unwrap().data(), &[0.5, 0.5, 0.5]);
        let c = RgbImage::filled(32, 16, [0.3, 0.6, 0.9]);
        for i in 1..=5 {
            let d = downscale_reference(&c, i).unwrap();
            assert_eq!((d.width(), d.height()), (32 >> (i - 1), 16 >> (i - 1)));
            assert!(d.data().chunks(3).all(|p| p == [0.3, 0.6, 0.9]));
        }
        assert!(downscale_reference(&c, 6).is_err());
        assert!(downscale_reference(&c, 0).is_err());
    }

    fn score_map() -> impl Strategy<Value = ScoreMap> {
        (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            prop::collection::vec(-2.0f64..3.0, r * c).prop_map(move |v| ScoreMap::new(r, c, v).unwrap())
        })
    }

    fn scale_scores() -> impl Strategy<Value = ScaleScores> {
        prop::collection::vec(score_map(), 1..7).prop_map(|m| ScaleScores::new(m).unwrap())
    }

    fn permuted(s: &ScaleScores, shift: usize) -> ScaleScores {
        let maps = s
            .maps()
            .iter()
            .map(|m| {
                let mut v = m.values().to_vec();
                let k = shift % v.len();
                v.rotate_left(k);
                v.reverse();
                ScoreMap::new(m.rows(), m.cols(), v).unwrap()
            })
            .collect();
        ScaleScores::new(maps).unwrap()
    }

    fn with_duplicate(s: &ScaleScores, i: usize) -> ScaleScores {
        let mut maps = s.maps().to_vec();
        maps.push(maps[i].clone());
        ScaleScores::new(maps).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn losses_are_non_negative(f in scale_scores(), r in scale_scores()) {
            prop_assert!(generator_adv_loss(&f) >= 0.0);
            if f.scales() == r.scales() {
                prop_assert!(discriminator_adv_loss(&f, &r).unwrap() >= 0.0);
            }
        }

        #[test]
        fn losses_ignore_entry_order(f in scale_scores(), shift in 0usize..16) {
            let p = permuted(&f, shift);
            prop_assert!((generator_adv_loss(&f) - generator_adv_loss(&p)).abs() < 1e-12);
            let d0 = discriminator_adv_loss(&f, &f).unwrap();
            let d1 = discriminator_adv_loss(&p, &p).unwrap();
            prop_assert!((d0 - d1).abs() < 1e-12);
        }

        #[test]
        fn duplicating_a_scale_adds_its_term(f in scale_scores(), pick in 0usize..16) {
            let i = pick % f.scales();
            let one = ScaleScores::new(vec![f.maps()[i].clone()]).unwrap();
            let g = with_duplicate(&f, i);
            prop_assert!((generator_adv_loss(&g) - generator_adv_loss(&f) - generator_adv_loss(&one)).abs() < 1e-9);
            let d = discriminator_adv_loss(&g, &g).unwrap() - discriminator_adv_loss(&f, &f).unwrap();
            prop_assert!((d - discriminator_adv_loss(&one, &one).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn generator_zero_iff_all_ones(f in scale_scores()) {
            let all_one = f.maps().iter().all(|m| m.values().iter().all(|&v| v == 1.0));
            prop_assert_eq!(generator_adv_loss(&f) == 0.0, all_one);
        }
    }
}
