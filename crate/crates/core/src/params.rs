// Weight structs are generic over their leaf type: `Tensor` for stored
// weights, `Var` once bound to a tape. Each provides a `map` that visits its
// leaves in a fixed order under a dotted name.

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
