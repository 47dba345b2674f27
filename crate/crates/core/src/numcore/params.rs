use crate::error::{Error, Result};

/// A collection of trainable scalars with a fixed traversal order.
///
/// Gradients are represented by values of the same type, so the same order
/// lines a parameter up with its gradient.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(f64));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut f64));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |v| out.push(v));
        out
    }

    fn assign(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if values.len() != expected {
            return Err(Error::Length {
                what: "parameter vector",
                expected,
                got: values.len(),
            });
        }
        let mut it = values.iter();
        self.visit_mut(&mut |p| *p = *it.next().unwrap());
        Ok(())
    }

    /// `self += alpha · other`, elementwise in traversal order.
    fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let g = other.flatten();
        let expected = self.num_params();
        if g.len() != expected {
            return Err(Error::Length {
                what: "parameter vector",
                expected,
                got: g.len(),
            });
        }
        let mut it = g.iter();
        self.visit_mut(&mut |p| *p += alpha * it.next().unwrap());
        Ok(())
    }

    fn zero(&mut self) {
        self.visit_mut(&mut |p| *p = 0.0);
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |v| ok &= v.is_finite());
        ok
    }
}
