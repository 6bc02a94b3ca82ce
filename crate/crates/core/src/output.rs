//! CSV artifacts: value function, control law, zero level set and cross
//! sections, plus readers for the first two.
//!
//! Reals are written with 17 significant digits so that files read back
//! bit-exactly.

use std::path::Path;

use crate::engine::{PwcControlLaw, PwcValueFunction};
use crate::error::{Error, Result};
use crate::grid::{InputGrid, Region, TileIndex};

fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn tile_header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=dim).map(|k| format!("c{k}")).collect();
    h.extend((1..=dim).map(|k| format!("x{k}")));
    h
}

fn tile_fields(region: &Region, i: usize) -> Vec<String> {
    let t = &region.tiles()[i];
    let mut f: Vec<String> = t.coords.iter().map(|c| c.to_string()).collect();
    f.extend(region.grid().lower_corner(t).into_iter().map(real));
    f
}

fn write_value_rows(path: &Path, region: &Region, v: &PwcValueFunction, rows: impl Iterator<Item = usize>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = tile_header(region.grid().dim());
    header.push("value".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for i in rows {
        let mut rec = tile_fields(region, i);
        rec.push(real(v.values[i]));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// One row per region tile: integer coordinates, lower corner, `V`.
pub fn write_values(path: &Path, region: &Region, v: &PwcValueFunction) -> Result<()> {
    write_value_rows(path, region, v, 0..region.len())
}

/// One row per region tile: integer coordinates, lower corner, input index
/// and input value.
pub fn write_law(path: &Path, region: &Region, law: &PwcControlLaw, inputs: &InputGrid) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = tile_header(region.grid().dim());
    header.push("r_index".into());
    header.push("r".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (i, &j) in law.choice.iter().enumerate() {
        let mut rec = tile_fields(region, i);
        rec.push(j.to_string());
        rec.push(real(inputs.values()[j as usize]));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

/// Tiles with `V > 0` that have a face neighbour with `V = 0` (tiles outside
/// the region count as zero).
pub fn zero_level_set(region: &Region, v: &PwcValueFunction) -> Vec<usize> {
    let mut out = Vec::new();
    let mut nb = Vec::new();
    for (i, t) in region.tiles().iter().enumerate() {
        if v.values[i] <= 0.0 {
            continue;
        }
        let mut boundary = false;
        'dirs: for k in 0..t.coords.len() {
            for step in [-1, 1] {
                nb.clear();
                nb.extend_from_slice(&t.coords);
                nb[k] += step;
                if region.index_of(&nb).map_or(true, |s| v.values[s] <= 0.0) {
                    boundary = true;
                    break 'dirs;
                }
            }
        }
        if boundary {
            out.push(i);
        }
    }
    out
}

pub fn write_zero_level_set(path: &Path, region: &Region, v: &PwcValueFunction) -> Result<()> {
    write_value_rows(path, region, v, zero_level_set(region, v).into_iter())
}

/// Lines through the origin sampled by the cross-section files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    /// `x1 = -x2`: tiles `(c, -c - 1)`, whose centres lie on the line.
    Anti,
    /// `x1 = x2`: tiles `(c, c)`.
    Diagonal,
}

impl Section {
    /// Whether the tile belongs to the section. Coordinates beyond the
    /// second are fixed to tile 0; in one dimension every tile belongs.
    pub fn contains(self, coords: &[i64]) -> bool {
        if coords.len() < 2 {
            return true;
        }
        let on_line = match self {
            Section::Anti => coords[1] == -coords[0] - 1,
            Section::Diagonal => coords[1] == coords[0],
        };
        on_line && coords[2..].iter().all(|&c| c == 0)
    }
}

/// Region tiles of a section, in increasing first coordinate.
pub fn cross_section(region: &Region, section: Section) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..region.len())
        .filter(|&i| section.contains(&region.tiles()[i].coords))
        .collect();
    if region.grid().dim() >= 2 {
        rows.sort_by_key(|&i| region.tiles()[i].coords[0]);
    }
    rows
}

pub fn write_cross_section(path: &Path, region: &Region, v: &PwcValueFunction, section: Section) -> Result<()> {
    write_value_rows(path, region, v, cross_section(region, section).into_iter())
}

fn read_rows(path: &Path, dim: usize, extra: &[&str]) -> Result<Vec<(TileIndex, Vec<String>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut expected = tile_header(dim);
    expected.extend(extra.iter().map(|s| s.to_string()));
    if header != expected {
        return Err(csv_err(path, format!("expected header {expected:?}, got {header:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let coords = (0..dim)
            .map(|k| rec[k].trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| csv_err(path, format!("row {}: {e}", line + 2)))?;
        let rest = (2 * dim..rec.len()).map(|k| rec[k].to_string()).collect();
        out.push((TileIndex::new(coords), rest));
    }
    Ok(out)
}

/// Reads a value file written by [`write_values`].
pub fn read_values(path: &Path, dim: usize) -> Result<(Vec<TileIndex>, Vec<f64>)> {
    let rows = read_rows(path, dim, &["value"])?;
    let mut tiles = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len());
    for (n, (t, rest)) in rows.into_iter().enumerate() {
        let v: f64 = rest[0]
            .trim()
            .parse()
            .map_err(|e| csv_err(path, format!("row {}: {e}", n + 2)))?;
        tiles.push(t);
        values.push(v);
    }
    Ok((tiles, values))
}

/// Reads a law file written by [`write_law`]; the input index must be
/// consistent with the stored value of `r`.
pub fn read_law(path: &Path, dim: usize, inputs: &InputGrid) -> Result<(Vec<TileIndex>, Vec<u32>)> {
    let rows = read_rows(path, dim, &["r_index", "r"])?;
    let mut tiles = Vec::with_capacity(rows.len());
    let mut choice = Vec::with_capacity(rows.len());
    for (n, (t, rest)) in rows.into_iter().enumerate() {
        let bad = |e: String| csv_err(path, format!("row {}: {e}", n + 2));
        let j: usize = rest[0].trim().parse().map_err(|e| bad(format!("{e}")))?;
        let r: f64 = rest[1].trim().parse().map_err(|e| bad(format!("{e}")))?;
        if inputs.index_of(r) != Some(j) {
            return Err(bad(format!("input {r} does not match index {j} of the input grid")));
        }
        tiles.push(t);
        choice.push(j as u32);
    }
    Ok((tiles, choice))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn line_region(n: i64) -> Region {
        let grid = Grid::new(4, 2).unwrap();
        let mut tiles = Vec::new();
        for a in -n..n {
            for b in -n..n {
                tiles.push(TileIndex::new(vec![a, b]));
            }
        }
        Region::from_tiles(&grid, tiles, None).unwrap()
    }

    #[test]
    fn zero_function_has_empty_level_set() {
        let region = line_region(3);
        let v = PwcValueFunction::zeros(region.len());
        assert!(zero_level_set(&region, &v).is_empty());
    }

    #[test]
    fn level_set_is_the_rim_of_the_support() {
        let region = line_region(3);
        let v = PwcValueFunction {
            values: region
                .tiles()
                .iter()
                .map(|t| if t.coords.iter().all(|c| (-2..2).contains(c)) { 1.0 } else { 0.0 })
                .collect(),
        };
        let rim = zero_level_set(&region, &v);
        // 4x4 support block minus its 2x2 interior.
        assert_eq!(rim.len(), 12);
    }

    #[test]
    fn anti_section_pairs_under_negation() {
        let region = line_region(3);
        let rows = cross_section(&region, Section::Anti);
        assert_eq!(rows.len(), 6);
        for &i in &rows {
            let c = &region.tiles()[i].coords;
            let neg: Vec<i64> = c.iter().map(|v| -v - 1).collect();
            assert!(Section::Anti.contains(&neg));
        }
    }

    #[test]
    fn one_dimensional_sections_are_the_value_file() {
        let grid = Grid::new(4, 1).unwrap();
        let tiles = (-3..3).map(|c| TileIndex::new(vec![c])).collect();
        let region = Region::from_tiles(&grid, tiles, None).unwrap();
        let v = PwcValueFunction {
            values: (0..6).map(|k| k as f64 / 3.0).collect(),
        };
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let (a, b, c) = (dir.join("v.csv"), dir.join("a.csv"), dir.join("d.csv"));
        write_values(&a, &region, &v).unwrap();
        write_cross_section(&b, &region, &v, Section::Anti).unwrap();
        write_cross_section(&c, &region, &v, Section::Diagonal).unwrap();
        let full = std::fs::read(&a).unwrap();
        assert_eq!(std::fs::read(&b).unwrap(), full);
        assert_eq!(std::fs::read(&c).unwrap(), full);
        let (t, back) = read_values(&a, 1).unwrap();
        assert_eq!(t, region.tiles());
        assert_eq!(back, v.values);
    }

    #[test]
    fn law_round_trip_checks_the_input_grid() {
        let region = line_region(1);
        let inputs = InputGrid::new(4);
        let law = PwcControlLaw {
            choice: vec![0, 3, 4, 8],
        };
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let p = dir.join("law.csv");
        write_law(&p, &region, &law, &inputs).unwrap();
        let (tiles, choice) = read_law(&p, 2, &inputs).unwrap();
        assert_eq!(tiles, region.tiles());
        assert_eq!(choice, law.choice);
        assert!(read_law(&p, 2, &InputGrid::new(8)).is_err());
    }
}
