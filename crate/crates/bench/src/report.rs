//! CSV and aligned-text rendering of result grids.

use std::fmt::Write as _;
use std::io::Write;

/// A labeled 2-D grid; `None` cells are not applicable.
#[derive(Debug, Clone)]
pub struct Grid {
    pub title: String,
    pub corner: String,
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl Grid {
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![self.corner.clone()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (label, row) in self.rows.iter().zip(&self.cells) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"))));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let fmt = |c: &Option<f64>| c.map_or_else(|| "-".to_string(), |v| format!("{v:.1}"));
        let mut width = self.corner.len().max(self.rows.iter().map(String::len).max().unwrap_or(0));
        for (j, col) in self.cols.iter().enumerate() {
            width = width.max(col.len());
            for row in &self.cells {
                width = width.max(fmt(&row[j]).len());
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let _ = write!(s, "{:<width$}", self.corner);
        for col in &self.cols {
            let _ = write!(s, "  {col:>width$}");
        }
        s.push('\n');
        for (label, row) in self.rows.iter().zip(&self.cells) {
            let _ = write!(s, "{label:<width$}");
            for c in row {
                let _ = write!(s, "  {:>width$}", fmt(c));
            }
            s.push('\n');
        }
        s
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn grid_output() {
        let g = Grid {
            title: "t".into(),
            corner: "Ts\\Ta".into(),
            rows: vec!["1".into(), "10".into()],
            cols: vec!["1".into(), "10".into()],
            cells: vec![vec![Some(100.0), Some(10.0)], vec![None, Some(5.25)]],
        };
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "Ts\\Ta,1,10\n1,100.000,10.000\n10,n/a,5.250\n");
        let text = g.render();
        assert!(text.lines().nth(3).unwrap().contains('-'));
    }
}
