//! Regenerates the committed C header from the extern "C" surface.

use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let header = crate_dir.join("include").join("hemoscan.h");
    let bindings = cbindgen::generate(&crate_dir).expect("cbindgen generation");
    let mut rendered = Vec::new();
    bindings.write(&mut rendered);
    // Rewrite only on change so the committed header's mtime stays stable.
    if std::fs::read(&header).ok().as_deref() != Some(rendered.as_slice()) {
        std::fs::create_dir_all(header.parent().expect("include dir")).expect("create include/");
        std::fs::write(&header, rendered).expect("write header");
    }
}
