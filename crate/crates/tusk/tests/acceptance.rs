// placeholder; filled in once the library compiles
#[test]
fn placeholder() {}
