use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{domain_err, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DropRow {
    pub model: String,
    pub val: f64,
    pub cells: Vec<f64>,
    /// Mean of `cells`.
    pub overall: f64,
    /// `overall - val`.
    pub delta: f64,
}

impl DropRow {
    /// Signed change of every cell relative to `val`.
    pub fn cell_deltas(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c - self.val).collect()
    }
}

/// mIoU per model and variation, with the overall mean and its drop.
#[derive(Debug, Clone, PartialEq)]
pub struct DropTable {
    pub variations: Vec<String>,
    pub rows: Vec<DropRow>,
}

/// Builds a drop table from `(model, val, cells)` records, one cell per
/// variation.
pub fn drop_table(variations: &[String], records: &[(String, f64, Vec<f64>)]) -> Result<DropTable> {
    if variations.is_empty() {
        return Err(domain_err!("drop table needs at least one variation"));
    }
    let mut rows = Vec::with_capacity(records.len());
    for (model, val, cells) in records {
        if cells.len() != variations.len() {
            return Err(shape_err!(
                "model {model} has {} cells for {} variations",
                cells.len(),
                variations.len()
            ));
        }
        let overall = cells.iter().sum::<f64>() / cells.len() as f64;
        rows.push(DropRow {
            model: model.clone(),
            val: *val,
            cells: cells.clone(),
            overall,
            delta: overall - val,
        });
    }
    Ok(DropTable {
        variations: variations.to_vec(),
        rows,
    })
}

/// Symmetric table over pairs of variations; single-variation results sit on
/// the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComboTable {
    pub variations: Vec<String>,
    /// Row-major `k x k`, `None` for pairs that were not measured.
    pub cells: Vec<Option<f64>>,
}

impl ComboTable {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.variations.len() + j]
    }
}

pub fn combo_table(variations: &[String], singles: &[f64], pairs: &[(usize, usize, f64)]) -> Result<ComboTable> {
    let k = variations.len();
    if k == 0 {
        return Err(domain_err!("combination table needs at least one variation"));
    }
    if singles.len() != k {
        return Err(shape_err!("{} single values for {k} variations", singles.len()));
    }
    let mut cells = alloc::vec![None; k * k];
    for (i, &v) in singles.iter().enumerate() {
        cells[i * k + i] = Some(v);
    }
    for &(i, j, v) in pairs {
        if i >= k || j >= k || i == j {
            return Err(shape_err!("pair ({i}, {j}) is not an off-diagonal cell of a {k}x{k} table"));
        }
        if cells[i * k + j].is_some() {
            return Err(domain_err!("pair ({i}, {j}) given twice"));
        }
        cells[i * k + j] = Some(v);
        cells[j * k + i] = Some(v);
    }
    Ok(ComboTable {
        variations: variations.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| alloc::format!("v{i}")).collect()
    }

    #[test]
    fn arithmetic_example() {
        let t = drop_table(&names(2), &[("m".to_string(), 80.0, vec![60.0, 70.0])]).unwrap();
        assert_eq!(t.rows[0].overall, 65.0);
        assert_eq!(t.rows[0].delta, -15.0);
        assert_eq!(t.rows[0].cell_deltas(), vec![-20.0, -10.0]);
    }

    #[test]
    fn published_rows_reproduce_overall_column() {
        let rows = vec![
            (
                "DeepLabV3+".to_string(),
                73.65,
                vec![66.46, 67.29, 63.34, 52.96, 54.10, 55.07, 41.98, 62.85, 63.59, 65.14, 61.39, 15.33],
            ),
            (
                "CATSeg".to_string(),
                95.59,
                vec![88.06, 88.51, 87.28, 82.93, 81.96, 82.26, 74.79, 88.63, 90.30, 90.06, 92.95, 48.06],
            ),
        ];
        let t = drop_table(&names(12), &rows).unwrap();
        assert!((t.rows[0].overall - 55.79).abs() < 0.01);
        assert!((t.rows[0].delta + 17.86).abs() < 0.01);
        assert!((t.rows[1].overall - 82.98).abs() < 0.01);
        assert!((t.rows[1].delta + 12.61).abs() < 0.01);
    }

    #[test]
    fn ragged_and_empty_inputs() {
        assert!(drop_table(&[], &[]).is_err());
        assert!(drop_table(&names(3), &[("m".into(), 1.0, vec![1.0])]).is_err());
    }

    #[test]
    fn combo_is_symmetric() {
        let t = combo_table(&names(3), &[1.0, 2.0, 3.0], &[(0, 2, 0.5), (1, 0, 0.7)]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.get(i, j), t.get(j, i));
            }
        }
        assert_eq!(t.get(1, 1), Some(2.0));
        assert_eq!(t.get(0, 1), Some(0.7));
        assert_eq!(t.get(1, 2), None);
        assert!(combo_table(&names(2), &[1.0, 2.0], &[(0, 1, 1.0), (1, 0, 1.0)]).is_err());
        assert!(combo_table(&names(2), &[1.0, 2.0], &[(0, 0, 1.0)]).is_err());
    }
}
