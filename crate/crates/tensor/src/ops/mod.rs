mod attention;
mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;
mod shape;

/// True when any of the given parents carries a tape node.
fn tracked<T>(parents: &[Option<&crate::Var<T>>]) -> bool {
    parents.iter().flatten().any(|v| v.node.is_some())
}
