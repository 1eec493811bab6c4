//! Serde adapters for the JSON schema: complex numbers as `{"re": .., "im": ..}`,
//! matrices as row-major nested arrays.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::linalg::C64;

#[derive(Serialize, Deserialize)]
struct ComplexRepr {
    re: f64,
    im: f64,
}

pub mod complex {
    use super::*;

    pub fn serialize<S: Serializer>(z: &C64, s: S) -> Result<S::Ok, S::Error> {
        ComplexRepr { re: z.re, im: z.im }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<C64, D::Error> {
        let r = ComplexRepr::deserialize(d)?;
        Ok(C64::new(r.re, r.im))
    }
}

pub mod complex_vec {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[C64], s: S) -> Result<S::Ok, S::Error> {
        let reprs: Vec<ComplexRepr> = v.iter().map(|z| ComplexRepr { re: z.re, im: z.im }).collect();
        reprs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<C64>, D::Error> {
        let reprs = Vec::<ComplexRepr>::deserialize(d)?;
        Ok(reprs.into_iter().map(|r| C64::new(r.re, r.im)).collect())
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn from_rows<E: serde::de::Error>(rows: Vec<Vec<f64>>) -> Result<DMatrix<f64>, E> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(E::custom("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub mod real_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        rows_of(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        from_rows(Vec::<Vec<f64>>::deserialize(d)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ComplexMatrixRepr {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

pub mod complex_matrix {
    use super::*;

    pub fn serialize<S: Serializer>(m: &DMatrix<C64>, s: S) -> Result<S::Ok, S::Error> {
        ComplexMatrixRepr {
            re: rows_of(&m.map(|z| z.re)),
            im: rows_of(&m.map(|z| z.im)),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<C64>, D::Error> {
        let r = ComplexMatrixRepr::deserialize(d)?;
        let re = from_rows::<D::Error>(r.re)?;
        let im = from_rows::<D::Error>(r.im)?;
        if re.shape() != im.shape() {
            return Err(serde::de::Error::custom("real and imaginary parts differ in shape"));
        }
        Ok(DMatrix::from_fn(re.nrows(), re.ncols(), |i, j| C64::new(re[(i, j)], im[(i, j)])))
    }
}
