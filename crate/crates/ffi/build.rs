//! Generates the C header for the FFI surface with cbindgen. The header is
//! written both to OUT_DIR and to include/adjoint_ts.h so downstream builds
//! can consume it straight from the source tree.

use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    let out_path = PathBuf::from(env::var("OUT_DIR").unwrap()).join("adjoint_ts.h");
    let include_path = PathBuf::from(&crate_dir)
        .join("include")
        .join("adjoint_ts.h");

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let config = cbindgen::Config::from_file(PathBuf::from(&crate_dir).join("cbindgen.toml"))
        .expect("reading cbindgen.toml");
    let bindings = cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen header generation failed");
    bindings.write_to_file(&out_path);
    std::fs::create_dir_all(include_path.parent().unwrap()).unwrap();
    bindings.write_to_file(&include_path);
}
