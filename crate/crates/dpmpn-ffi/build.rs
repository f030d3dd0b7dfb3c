use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let out_path = PathBuf::from(env::var("OUT_DIR").unwrap()).join("dpmpn.h");
    let config = cbindgen::Config::from_file(PathBuf::from(&crate_dir).join("cbindgen.toml"))
        .expect("cbindgen.toml");
    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
    {
        Ok(bindings) => {
            bindings.write_to_file(&out_path);
            // Keep the committed header in sync when it changed.
            let committed = PathBuf::from(&crate_dir).join("include").join("dpmpn.h");
            let new = std::fs::read(&out_path).unwrap_or_default();
            let old = std::fs::read(&committed).unwrap_or_default();
            if new != old {
                let _ = std::fs::create_dir_all(committed.parent().unwrap());
                let _ = std::fs::write(&committed, &new);
            }
        }
        Err(e) => {
            // Header generation failures should not break the build of the
            // library itself; surface them as warnings.
            println!("cargo:warning=cbindgen failed: {e}");
        }
    }
}
