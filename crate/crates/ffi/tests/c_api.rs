use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use narx_ffi::*;

fn data(n: usize) -> (Vec<f64>, Vec<f64>) {
    // y(k) = 0.5 y(k-1) + u(k-1) - 0.1 u(k-1)^2, deterministic input
    let u: Vec<f64> = (0..n).map(|k| ((k * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let mut y = vec![0.0; n];
    for k in 1..n {
        y[k] = 0.5 * y[k - 1] + u[k - 1] - 0.1 * u[k - 1] * u[k - 1];
    }
    (u, y)
}

fn last_error() -> String {
    let p = narx_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn select_fit_simulate_validate_round_trip() {
    let (u, y) = data(400);
    let meta = CString::new("ny=1,nu=1,l=2,d=1").unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { narx_select(NarxMethod::Err, meta.as_ptr(), 6, false, u.as_ptr(), y.as_ptr(), u.len(), &mut model) };
    assert_eq!(st, NarxStatus::Ok, "{}", if st == NarxStatus::Ok { String::new() } else { last_error() });
    assert_eq!(unsafe { narx_model_n_terms(model) }, 3);

    let mut theta = [0.0; 3];
    assert_eq!(unsafe { narx_model_parameters(model, theta.as_mut_ptr(), 3) }, 3);
    let mut sorted = theta;
    sorted.sort_by(f64::total_cmp);
    for (got, want) in sorted.iter().zip([-0.1, 0.5, 1.0]) {
        assert!((got - want).abs() < 1e-9, "{theta:?}");
    }

    let mut sim = vec![0.0; u.len()];
    let init = [0.0];
    let st = unsafe { narx_model_simulate(model, u.as_ptr(), u.len(), init.as_ptr(), 1, sim.as_mut_ptr()) };
    assert_eq!(st, NarxStatus::Ok);
    let err = sim.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "max free-run error {err}");

    let mut v = NarxValidation::default();
    let st = unsafe { narx_validate(model, u.as_ptr(), y.as_ptr(), u.len(), 10, &mut v) };
    assert_eq!(st, NarxStatus::Ok);
    assert!(v.rmse < 1e-8);
    assert_eq!(v.tests_total, 5);

    // JSON round trip through a second handle
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { narx_model_to_json(model, &mut json) }, NarxStatus::Ok);
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { narx_model_from_json(json, &mut again) }, NarxStatus::Ok);
    let mut theta2 = [0.0; 3];
    unsafe { narx_model_parameters(again, theta2.as_mut_ptr(), 3) };
    assert_eq!(theta, theta2);
    unsafe {
        narx_string_free(json);
        narx_model_free(again);
        narx_model_free(model);
    }
}

#[test]
fn fit_with_structure_and_constraints() {
    let (u, y) = data(300);
    let structure = CString::new(
        r#"{"meta":{"ny":1,"nu":1,"ne":0,"ell":2,"d":1},
            "regressors":[[["y",1,1]],[["u",1,1]],[["u",1,2]]]}"#,
    )
    .unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { narx_fit(structure.as_ptr(), u.as_ptr(), y.as_ptr(), u.len(), ptr::null(), &mut model) };
    assert_eq!(st, NarxStatus::Ok, "{}", if st == NarxStatus::Ok { String::new() } else { last_error() });
    let mut theta = [0.0; 3];
    unsafe { narx_model_parameters(model, theta.as_mut_ptr(), 3) };
    for (got, want) in theta.iter().zip([0.5, 1.0, -0.1]) {
        assert!((got - want).abs() < 1e-9, "{theta:?}");
    }
    unsafe { narx_model_free(model) };

    // pin the y(k-1) and u(k-1) coefficients away from the truth
    let cons = CString::new(
        r#"{"rows":[{"s":[1.0,0.0,0.0],"c":0.4,"note":"a"},{"s":[0.0,1.0,1.0],"c":1.0,"note":"b"}]}"#,
    )
    .unwrap();
    let mut model = ptr::null_mut();
    let st = unsafe { narx_fit(structure.as_ptr(), u.as_ptr(), y.as_ptr(), u.len(), cons.as_ptr(), &mut model) };
    assert_eq!(st, NarxStatus::Ok, "{}", if st == NarxStatus::Ok { String::new() } else { last_error() });
    unsafe { narx_model_parameters(model, theta.as_mut_ptr(), 3) };
    assert!((theta[0] - 0.4).abs() < 1e-10);
    assert!((theta[1] + theta[2] - 1.0).abs() < 1e-10);
    unsafe { narx_model_free(model) };
}

#[test]
fn errors_carry_status_and_message() {
    let meta = CString::new("ny=oops").unwrap();
    let (u, y) = data(50);
    let mut model = ptr::null_mut();
    let st = unsafe { narx_select(NarxMethod::Err, meta.as_ptr(), 4, false, u.as_ptr(), y.as_ptr(), 50, &mut model) };
    assert_eq!(st, NarxStatus::InvalidInput);
    assert!(!last_error().is_empty());
    assert!(model.is_null());

    let bad = CString::new(r#"{"seed": 1, "bogus": true}"#).unwrap();
    let st = unsafe { narx_pipeline_run(bad.as_ptr(), ptr::null_mut()) };
    assert_eq!(st, NarxStatus::InvalidInput);
    assert!(last_error().contains("bogus"));

    unsafe {
        narx_model_free(ptr::null_mut());
        narx_string_free(ptr::null_mut());
    }
    assert_eq!(unsafe { narx_model_n_terms(ptr::null()) }, 0);
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/narx.h");
    assert!(header.exists());
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "narx_version",
        "narx_last_error_message",
        "narx_model_from_json",
        "narx_model_to_json",
        "narx_model_simulate",
        "narx_fit",
        "narx_select",
        "narx_validate",
        "narx_pipeline_run",
        "narx_model_free",
        "narx_string_free",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"narx.h\"\n\
         int main(void) {\n\
           NarxModel *m = NULL;\n\
           NarxValidation v;\n\
           NarxStatus s = narx_model_from_json(\"{}\", &m);\n\
           if (s != NARX_STATUS_OK) return (int)s;\n\
           s = narx_validate(m, NULL, NULL, 0, 1, &v);\n\
           narx_model_free(m);\n\
           return (int)s;\n\
         }\n",
    )
    .unwrap();
    let Ok(out) = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-c", "-o"])
        .arg(tmp.path().join("use.o"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&src)
        .output()
    else {
        eprintln!("no C compiler found; skipped compile check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
