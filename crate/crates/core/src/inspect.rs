//! Per-unit analysis of the selection signature: which images switch a
//! factor module on, and which ground-truth attributes each unit tracks.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{Mlfn, MlfnConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::predict;

/// Selection signature of every image, `[N, ΣK]`, in eval mode.
pub fn signature_matrix<T: Scalar>(model: &Mlfn<T>, images: &Tensor<T>) -> Result<Tensor<f64>> {
    if !model.config().mode.has_selection() {
        return Err(Error::Config(format!("mode {} has no selection modules", model.config().mode)));
    }
    let out = predict(model, images, 64)?;
    Ok(out.signature.expect("selection modes report a signature").cast())
}

/// Column of unit `unit` of block `block` (both 1-based) in the signature.
pub fn unit_column(config: &MlfnConfig, block: usize, unit: usize) -> Result<usize> {
    if block == 0 || block > config.blocks.len() {
        return Err(Error::Config(format!("block {} outside 1..={}", block, config.blocks.len())));
    }
    let k = config.blocks[block - 1].factor_modules;
    if unit == 0 || unit > k {
        return Err(Error::Config(format!("unit {} outside 1..={} of block {}", unit, k, block)));
    }
    Ok(config.blocks[..block - 1].iter().map(|b| b.factor_modules).sum::<usize>() + unit - 1)
}

/// `(block, unit)`, both 1-based, of every signature column.
pub fn unit_labels(config: &MlfnConfig) -> Vec<(usize, usize)> {
    config.blocks.iter().enumerate().flat_map(|(n, b)| (1..=b.factor_modules).map(move |i| (n + 1, i))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitRanking {
    pub block: usize,
    pub unit: usize,
    /// Image indices by descending activation, ties by index.
    pub order: Vec<usize>,
    /// Activation of every image, in dataset order.
    pub scores: Vec<f64>,
    /// First `m` of `order`.
    pub top: Vec<usize>,
    /// Last `m` of `order`, lowest activation first.
    pub bottom: Vec<usize>,
}

pub fn rank_by_unit(signature: &Tensor<f64>, config: &MlfnConfig, block: usize, unit: usize, m: usize) -> Result<UnitRanking> {
    let col = unit_column(config, block, unit)?;
    let (n, width) = (signature.shape()[0], signature.shape()[1]);
    if width != config.signature_dim() {
        return Err(Error::Config(format!("signature width {} does not match the network's {}", width, config.signature_dim())));
    }
    if 2 * m > n {
        return Err(Error::Config(format!("cannot take top and bottom {} of {} images", m, n)));
    }
    let scores: Vec<f64> = signature.rows().map(|r| r[col]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let top = order[..m].to_vec();
    let bottom = order[n - m..].iter().rev().copied().collect();
    Ok(UnitRanking { block, unit, order, scores, top, bottom })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Association of a continuous score with a categorical attribute: the
/// largest absolute point-biserial correlation over one-vs-rest indicators.
/// A binary attribute reduces to its plain point-biserial correlation.
pub fn association(scores: &[f64], labels: &[usize]) -> f64 {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut best: f64 = 0.0;
    for c in 0..classes {
        let ind: Vec<f64> = labels.iter().map(|&l| (l == c) as u8 as f64).collect();
        best = best.max(pearson(scores, &ind).abs());
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Correlations {
    /// `(block, unit)` of each row.
    pub units: Vec<(usize, usize)>,
    pub attributes: Vec<String>,
    /// `[unit][attribute]` association in `[0, 1]`.
    pub values: Vec<Vec<f64>>,
}

impl Correlations {
    /// Row index of the unit most associated with attribute `a`.
    pub fn best_unit(&self, a: usize) -> usize {
        (0..self.values.len()).max_by(|&x, &y| self.values[x][a].total_cmp(&self.values[y][a]).then(y.cmp(&x))).expect("at least one unit")
    }

    /// Block (1-based) holding the unit most associated with each attribute.
    pub fn best_blocks(&self) -> Vec<usize> {
        (0..self.attributes.len()).map(|a| self.units[self.best_unit(a)].0).collect()
    }

    /// Attribute with the strongest unit association inside `block`.
    pub fn dominant_attribute(&self, block: usize) -> Option<usize> {
        let rows: Vec<usize> = (0..self.units.len()).filter(|&r| self.units[r].0 == block).collect();
        (0..self.attributes.len())
            .map(|a| (a, rows.iter().map(|&r| self.values[r][a]).fold(0.0, f64::max)))
            .max_by(|x, y| x.1.total_cmp(&y.1).then(y.0.cmp(&x.0)))
            .map(|(a, _)| a)
    }
}

/// Associations between every signature column and every attribute column.
/// `attributes[i][a]` is the value of attribute `a` on image `i`.
pub fn correlate_units(signature: &Tensor<f64>, config: &MlfnConfig, attributes: &[Vec<usize>], names: &[&str]) -> Result<Correlations> {
    let n = signature.shape()[0];
    if attributes.len() != n || attributes.iter().any(|r| r.len() != names.len()) {
        return Err(Error::Config(format!("{} attribute rows of width {} for {} images", attributes.len(), names.len(), n)));
    }
    let units = unit_labels(config);
    if units.len() != signature.shape()[1] {
        return Err(Error::Config(format!("signature width {} does not match the network's {}", signature.shape()[1], units.len())));
    }
    let d = units.len();
    let mut values = vec![vec![0.0; names.len()]; d];
    for (u, row) in values.iter_mut().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| signature.data()[i * d + u]).collect();
        for (a, v) in row.iter_mut().enumerate() {
            let labels: Vec<usize> = attributes.iter().map(|r| r[a]).collect();
            *v = association(&col, &labels);
        }
    }
    Ok(Correlations { units, attributes: names.iter().map(|s| String::from(*s)).collect(), values })
}

/// Tile images `[N, C, H, W]` into `rows` rows of `cols`, separated by a
/// one-pixel white border. Returns `[C, H', W']`.
pub fn montage<T: Scalar>(images: &Tensor<T>, rows_of: &[&[usize]], cols: usize) -> Result<Tensor<T>> {
    let &[_, c, h, w] = images.shape() else {
        return Err(Error::Config(format!("montage needs NCHW images, got {:?}", images.shape())));
    };
    let rows = rows_of.len();
    let (hh, ww) = (rows * (h + 1) + 1, cols * (w + 1) + 1);
    let mut out = Tensor::full(&[c, hh, ww], T::one())?;
    for (r, idx) in rows_of.iter().enumerate() {
        if idx.len() > cols {
            return Err(Error::Config(format!("{} tiles in a row of {}", idx.len(), cols)));
        }
        for (k, &i) in idx.iter().enumerate() {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(&[ch, 1 + r * (h + 1) + y, 1 + k * (w + 1) + x], images.at(&[i, ch, y, x]));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::testutil::random_tensor;

    fn toy() -> MlfnConfig {
        MlfnConfig::toy(4)
    }

    #[test]
    fn columns_follow_block_layout() {
        let c = toy();
        assert_eq!(unit_column(&c, 1, 1).unwrap(), 0);
        assert_eq!(unit_column(&c, 2, 3).unwrap(), 6);
        assert!(unit_column(&c, 0, 1).is_err());
        assert!(unit_column(&c, 5, 1).is_err());
        assert!(unit_column(&c, 1, 5).is_err());
        assert_eq!(unit_labels(&c).len(), c.signature_dim());
    }

    #[test]
    fn constant_unit_ranks_by_index() {
        let sig = Tensor::full(&[50, 16], 0.5).unwrap();
        let r = rank_by_unit(&sig, &toy(), 2, 1, 20).unwrap();
        assert_eq!(r.order, (0..50).collect::<Vec<_>>());
        assert_eq!(r.top, (0..20).collect::<Vec<_>>());
        assert_eq!(r.bottom, (30..50).rev().collect::<Vec<_>>());
    }

    #[test]
    fn top_and_bottom_are_disjoint() {
        let sig = random_tensor(&[40, 16], 3);
        let r = rank_by_unit(&sig, &toy(), 4, 4, 20).unwrap();
        assert_eq!(r.top.len(), 20);
        assert!(r.top.iter().all(|t| !r.bottom.contains(t)));
        assert!(r.top.windows(2).all(|w| r.scores[w[0]] >= r.scores[w[1]]));
        assert!(r.scores[r.top[19]] >= r.scores[r.bottom[19]]);
        assert!(rank_by_unit(&sig, &toy(), 4, 4, 21).is_err());
    }

    #[test]
    fn zeroed_selection_head_gives_a_flat_ranking() {
        let mut m: Mlfn<f64> = Mlfn::init(toy(), 1).unwrap();
        let (w, b) = m.selection_output_layer(2).unwrap();
        m.params_mut().value_mut(w).fill(0.0);
        m.params_mut().value_mut(b).fill(0.0);
        let sig = signature_matrix(&m, &random_tensor(&[12, 3, 32, 16], 2)).unwrap();
        let r = rank_by_unit(&sig, &toy(), 3, 2, 6).unwrap();
        assert!(r.scores.iter().all(|&s| s == 0.5));
        assert_eq!(r.order, (0..12).collect::<Vec<_>>());
        let flat = signature_matrix(&Mlfn::<f64>::init(toy().with_mode(Mode::ResNeXt), 1).unwrap(), &random_tensor(&[2, 3, 32, 16], 2));
        assert!(flat.is_err());
    }

    #[test]
    fn indicator_unit_has_full_association() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let unit: Vec<f64> = labels.iter().map(|&l| (l == 2) as u8 as f64).collect();
        assert!((association(&unit, &labels) - 1.0).abs() < 1e-12);
        let binary: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let unit: Vec<f64> = binary.iter().map(|&l| l as f64 * 0.7 + 0.1).collect();
        assert!((association(&unit, &binary) - 1.0).abs() < 1e-12);
        assert_eq!(association(&[0.3; 30], &binary), 0.0);
    }

    #[test]
    fn random_unit_is_nearly_independent() {
        let r = random_tensor(&[400], 7);
        let binary: Vec<usize> = (0..400).map(|i| i % 2).collect();
        assert!(association(r.data(), &binary) < 0.2);
    }

    #[test]
    fn correlation_table_shape_and_best_blocks() {
        let c = toy();
        let n = 60;
        let attrs: Vec<Vec<usize>> = (0..n).map(|i| vec![i % 4, i % 2]).collect();
        let mut sig = random_tensor(&[n, 16], 5).map(|v| v * 0.01);
        // block 1 unit 1 copies colour 0, block 4 unit 2 copies the binary attribute
        for i in 0..n {
            sig.set(&[i, 0], (attrs[i][0] == 0) as u8 as f64);
            sig.set(&[i, 13], attrs[i][1] as f64);
        }
        let cor = correlate_units(&sig, &c, &attrs, &["color", "carry"]).unwrap();
        assert_eq!(cor.values.len(), 16);
        assert_eq!(cor.best_blocks(), [1, 4]);
        assert_eq!(cor.dominant_attribute(1), Some(0));
        assert_eq!(cor.dominant_attribute(4), Some(1));
    }

    #[test]
    fn montage_layout() {
        let imgs = random_tensor(&[40, 3, 4, 2], 1);
        let top: Vec<usize> = (0..20).collect();
        let bottom: Vec<usize> = (20..40).collect();
        let m = montage(&imgs, &[&top, &bottom], 20).unwrap();
        assert_eq!(m.shape(), &[3, 2 * 5 + 1, 20 * 3 + 1]);
        assert_eq!(m.at(&[1, 1 + 5 + 2, 1 + 3 * 4 + 1]), imgs.at(&[24, 1, 2, 1]));
        assert_eq!(m.at(&[0, 0, 0]), 1.0);
        assert_eq!(montage(&imgs, &[], 20).unwrap().shape(), &[3, 1, 61]);
    }
}
