use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// `op(a) * op(b)` for rank-2 operands, where `op` optionally transposes.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>, a_trans: bool, b_trans: bool) -> Result<Tensor<T>> {
    let (&[ar, ac], &[br, bc]) = (a.shape(), b.shape()) else {
        return Err(TensorError::shape(
            "matmul",
            format!("operands must be rank 2, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    };
    let (m, k) = if a_trans { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if b_trans { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(TensorError::shape(
            "matmul",
            format!(
                "inner extents differ: {:?}{} x {:?}{}",
                a.shape(),
                if a_trans { "^T" } else { "" },
                b.shape(),
                if b_trans { "^T" } else { "" }
            ),
        ));
    }
    let (rsa, csa) = if a_trans { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if b_trans { (1, bc as isize) } else { (bc as isize, 1) };
    let mut c = vec![T::zero(); m * n];
    // SAFETY: strides describe exactly the row-major buffers of `a` and `b`.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            T::zero(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Tensor::from_parts(vec![m, n], c))
}
