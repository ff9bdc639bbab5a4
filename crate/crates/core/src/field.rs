use nalgebra::DVector;

/// An autonomous vector field `x' = f(x)`.
pub trait VectorField {
    fn eval(&self, x: &DVector<f64>) -> DVector<f64>;
}

impl<F> VectorField for F
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        self(x)
    }
}
