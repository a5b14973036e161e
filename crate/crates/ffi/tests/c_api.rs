use std::ffi::{c_char, CString};
use std::ptr;

use smpc_ffi::*;

const TOY: &str = include_str!("../../../configs/toy_linear.toml");

fn toy() -> *mut SmpcScenario {
    let text = CString::new(TOY).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { smpc_scenario_from_toml(text.as_ptr(), &mut s) }, SmpcStatus::Ok);
    assert!(!s.is_null());
    s
}

fn last_error() -> String {
    let mut needed = 0usize;
    unsafe { smpc_last_error(ptr::null_mut(), 0, &mut needed) };
    let mut buf = vec![0 as c_char; needed];
    assert_eq!(unsafe { smpc_last_error(buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, SmpcStatus::Ok);
    let bytes: Vec<u8> = buf[..needed - 1].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

#[test]
fn dimensions_and_solve() {
    let s = toy();
    unsafe {
        assert_eq!(smpc_state_dim(s), 2);
        assert_eq!(smpc_input_dim(s), 1);
        assert_eq!(smpc_horizon(s), 10);
        let x = [0.0, 0.0];
        let mut u = [f64::NAN];
        let mut v = f64::NAN;
        assert_eq!(smpc_solve(s, x.as_ptr(), 2, u.as_mut_ptr(), 1, &mut v), SmpcStatus::Ok);
        assert!(u[0].abs() < 1e-8 && v.abs() < 1e-10);
        smpc_scenario_free(s);
    }
}

#[test]
fn errors_are_reported() {
    let s = toy();
    unsafe {
        let x = [0.0];
        let mut u = [0.0];
        assert_eq!(smpc_solve(s, x.as_ptr(), 1, u.as_mut_ptr(), 1, ptr::null_mut()), SmpcStatus::Dimension);
        assert!(last_error().contains("state"));
        assert_eq!(smpc_solve(ptr::null(), x.as_ptr(), 1, u.as_mut_ptr(), 1, ptr::null_mut()), SmpcStatus::NullPointer);
        let bad = CString::new("[model]\nkind = \"nope\"").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(smpc_scenario_from_toml(bad.as_ptr(), &mut h), SmpcStatus::Config);
        assert!(h.is_null());
        assert!(!last_error().is_empty());
        let path = CString::new("/nonexistent/config.toml").unwrap();
        assert_ne!(smpc_scenario_load(path.as_ptr(), &mut h), SmpcStatus::Ok);
        assert_eq!(smpc_state_dim(ptr::null()), 0);
        smpc_scenario_free(ptr::null_mut());
        smpc_controller_free(ptr::null_mut());
        smpc_scenario_free(s);
    }
}

#[test]
fn controller_regulates_toy_system() {
    let s = toy();
    unsafe {
        let mut c = ptr::null_mut();
        assert_eq!(smpc_controller_new(s, &mut c), SmpcStatus::Ok);
        // The controller keeps the scenario alive on its own.
        smpc_scenario_free(s);
        let (a, b) = ([[1.0, 0.1], [0.0, 1.0]], [0.005, 0.1]);
        let mut x = [0.3, -0.2];
        for _ in 0..150 {
            let mut u = [0.0];
            let mut fb = -1;
            assert_eq!(smpc_controller_step(c, x.as_ptr(), 2, u.as_mut_ptr(), 1, &mut fb), SmpcStatus::Ok);
            assert_eq!(fb, 0);
            assert!(u[0].abs() <= 1.0);
            x = [
                a[0][0] * x[0] + a[0][1] * x[1] + b[0] * u[0],
                a[1][0] * x[0] + a[1][1] * x[1] + b[1] * u[0],
            ];
        }
        assert!(x[0].hypot(x[1]) < 1e-2, "{x:?}");
        smpc_controller_free(c);
    }
}

#[test]
fn design_check_passes_on_toy() {
    let s = toy();
    let mut passed = -1;
    unsafe {
        assert_eq!(smpc_design_check(s, 3, &mut passed), SmpcStatus::Ok);
        smpc_scenario_free(s);
    }
    assert_eq!(passed, 1);
}

#[test]
fn header_declares_the_api() {
    let header = include_str!("../include/smpc.h");
    for name in [
        "typedef struct SmpcScenario SmpcScenario;",
        "typedef struct SmpcController SmpcController;",
        "SMPC_STATUS_OK = 0",
        "smpc_scenario_from_toml(",
        "smpc_scenario_load(",
        "smpc_scenario_free(",
        "smpc_solve(",
        "smpc_controller_step(",
        "smpc_simulate(",
        "smpc_last_error(",
    ] {
        assert!(header.contains(name), "{name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"smpc.h\"\nint main(void) {\n  SmpcScenario *s = NULL;\n  SmpcStatus st = smpc_scenario_load(\"x.toml\", &s);\n  smpc_scenario_free(s);\n  return st == SMPC_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include])
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "clang", "gcc"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok())
        .ok_or(())
}
