use serde::{Deserialize, Serialize};

use super::NeuralError;

/// A named dense array stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { name: name.into(), shape: shape.to_vec(), data: vec![0.0; n] }
    }
}

/// An ordered collection of named arrays: the trainable parameters of any
/// model, or a gradient with the same layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    arrays: Vec<NamedArray>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_arrays(arrays: Vec<NamedArray>) -> Self {
        Self { arrays }
    }

    pub fn push(&mut self, array: NamedArray) {
        self.arrays.push(array);
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn into_arrays(self) -> Vec<NamedArray> {
        self.arrays
    }

    /// Total number of scalars.
    pub fn len(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arrays: self
                .arrays
                .iter()
                .map(|a| NamedArray { name: a.name.clone(), shape: a.shape.clone(), data: vec![0.0; a.data.len()] })
                .collect(),
        }
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.arrays.iter().position(|a| a.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.position(name).map(|i| self.arrays[i].data.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.position(name).map(move |i| self.arrays[i].data.as_mut_slice())
    }

    /// Panics if `name` is absent; used by model views whose layout is fixed
    /// at construction.
    pub fn expect(&self, name: &str) -> &[f64] {
        self.get(name).unwrap_or_else(|| panic!("parameter {name:?} missing"))
    }

    /// Mutable slices for several distinct names at once, in request order.
    pub fn get_many_mut<const K: usize>(&mut self, names: [&str; K]) -> [&mut [f64]; K] {
        let idx = names.map(|n| self.position(n).unwrap_or_else(|| panic!("parameter {n:?} missing")));
        for a in 0..K {
            for b in a + 1..K {
                assert_ne!(idx[a], idx[b], "duplicate parameter name");
            }
        }
        let mut slots: Vec<Option<&mut [f64]>> =
            self.arrays.iter_mut().map(|a| Some(a.data.as_mut_slice())).collect();
        idx.map(|i| slots[i].take().expect("distinct"))
    }

    /// Flat scalar access in array order.
    pub fn flat_get(&self, mut index: usize) -> f64 {
        for a in &self.arrays {
            if index < a.data.len() {
                return a.data[index];
            }
            index -= a.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for a in &mut self.arrays {
            if index < a.data.len() {
                a.data[index] = value;
                return;
            }
            index -= a.data.len();
        }
        panic!("flat index out of range")
    }

    /// `(array name, offset within the array)` for a flat index.
    pub fn locate(&self, mut index: usize) -> Option<(&str, usize)> {
        for a in &self.arrays {
            if index < a.data.len() {
                return Some((&a.name, index));
            }
            index -= a.data.len();
        }
        None
    }

    pub fn check_same_layout(&self, other: &ParamVector) -> Result<(), NeuralError> {
        if self.arrays.len() != other.arrays.len() {
            return Err(NeuralError::ShapeMismatch(format!(
                "{} arrays vs {} arrays",
                self.arrays.len(),
                other.arrays.len()
            )));
        }
        for (a, b) in self.arrays.iter().zip(&other.arrays) {
            if a.name != b.name || a.shape != b.shape {
                return Err(NeuralError::ShapeMismatch(format!(
                    "{}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.arrays.iter().flat_map(|a| a.data.iter())
    }

    fn zip_mut(&mut self, other: &ParamVector, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                f(x, y);
            }
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) -> Result<(), NeuralError> {
        self.check_same_layout(other)?;
        self.zip_mut(other, |x, y| *x += scale * y);
        Ok(())
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector, NeuralError> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.arrays {
            a.data.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64, NeuralError> {
        self.check_same_layout(other)?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    /// Largest absolute difference, for tests and diagnostics.
    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.iter().zip(other.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(vals: &[(&str, &[f64])]) -> ParamVector {
        ParamVector::from_arrays(
            vals.iter()
                .map(|(n, d)| NamedArray { name: n.to_string(), shape: vec![d.len()], data: d.to_vec() })
                .collect(),
        )
    }

    #[test]
    fn arithmetic() {
        let a = pv(&[("w", &[1.0, 2.0]), ("b", &[3.0])]);
        let b = pv(&[("w", &[0.5, -1.0]), ("b", &[2.0])]);
        assert_eq!(a.dot(&b).unwrap(), 0.5 - 2.0 + 6.0);
        let s = a.add(&b).unwrap();
        assert_eq!(s.get("w").unwrap(), &[1.5, 1.0]);
        assert_eq!(a.scaled(2.0).get("b").unwrap(), &[6.0]);
        assert_eq!(a.flat_get(2), 3.0);
        assert_eq!(a.locate(1), Some(("w", 1)));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let a = pv(&[("w", &[1.0, 2.0])]);
        let b = pv(&[("v", &[1.0, 2.0])]);
        assert!(matches!(a.dot(&b), Err(NeuralError::ShapeMismatch(_))));
    }

    #[test]
    fn get_many_mut_returns_disjoint_slices() {
        let mut a = pv(&[("w", &[1.0, 2.0]), ("b", &[3.0])]);
        let [b, w] = a.get_many_mut(["b", "w"]);
        b[0] = 9.0;
        w[1] = 7.0;
        assert_eq!(a.get("b").unwrap(), &[9.0]);
        assert_eq!(a.get("w").unwrap(), &[1.0, 7.0]);
    }
}
