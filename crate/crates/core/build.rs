fn main() {
    println!("cargo:rerun-if-changed=csrc/recover.c");
    cc::Build::new()
        .file("csrc/recover.c")
        .flag_if_supported("-fno-omit-frame-pointer")
        .compile("rpcool_recover");
}
