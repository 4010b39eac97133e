use pyo3::prelude::*;

#[pymodule]
fn dampkit_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
