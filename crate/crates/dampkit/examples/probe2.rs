use dampkit::harness::{benchmark_oscillator, draw_viscosities, rng_for};
use dampkit::config::DamperPlacement;
use dampkit::modal::build_modal_form;
use dampkit::dpr1::{Dpr1, SolveOptions, solve};
use dampkit::system::build_oscillator;
use dampkit::C64;
use ndarray::prelude::*;

fn main() {
    let spec = benchmark_oscillator(40, DamperPlacement::B);
    let sys = build_oscillator(&spec, 0.004).unwrap();
    let mf = build_modal_form(&sys).unwrap();
    let mut rng = rng_for(11, "accuracy-n40-B");
    let v = draw_viscosities(&mut rng, 3);
    let target = C64::new(-0.002087112634109, 1.043554229939729);

    // replicate stage 1 manually
    let mut diag = mf.d.clone();
    let mut ucur: Vec<Array1<C64>> = (0..3).map(|j| mf.u.column(j).to_owned()).collect();
    let zcur: Vec<Array1<C64>> = (0..3).map(|j| mf.z.column(j).to_owned()).collect();
    for j in 0..3 {
        let unorm = ucur[j].iter().map(|c| c.norm()).fold(0.0, f64::max);
        let znorm = zcur[j].iter().map(|c| c.norm()).fold(0.0, f64::max);
        let tiny_u = ucur[j].iter().filter(|c| c.norm() <= 1e-15*unorm).count();
        let tiny_z = zcur[j].iter().filter(|c| c.norm() <= 1e-15*znorm).count();
        println!("stage {j}: tiny u entries {tiny_u}, tiny z entries {tiny_z}");
        let a = Dpr1 { d: diag.clone(), u: ucur[j].mapv(|x| -x), z: zcur[j].clone(), rho: v.0[j] };
        let eig = solve(&a, &SolveOptions::default()).unwrap();
        // nearest distance from each lambda to the stage diagonal, for the value closest to target
        let (icl, lam) = eig.values.iter().enumerate()
            .min_by(|(_,a),(_,b)| (*a-target).norm().partial_cmp(&(*b-target).norm()).unwrap())
            .map(|(i,&l)| (i,l)).unwrap();
        let (kmin, dmin) = diag.iter().enumerate()
            .map(|(k,&d)| (k, (d-lam).norm()))
            .min_by(|a,b| a.1.partial_cmp(&b.1).unwrap()).unwrap();
        println!("  tracked lambda {:.16e}{:+.16e}i at col {icl}", lam.re, lam.im);
        println!("  closest diag entry k={kmin}, |d-lam| = {dmin:.3e}, |u_k| = {:.3e} (rel {:.1e}), |z_k| = {:.3e} (rel {:.1e})",
                 ucur[j][kmin].norm(), ucur[j][kmin].norm()/unorm, zcur[j][kmin].norm(), zcur[j][kmin].norm()/znorm);
        // also count lambdas at distance < 1e-12 from some diag entry
        let nclose = eig.values.iter().filter(|&&l| diag.iter().any(|&d| (d-l).norm() < 1e-12*d.norm())).count();
        println!("  lambdas within 1e-12 of a diagonal entry: {nclose}");
        // duplicate lambdas?
        let mut sorted: Vec<C64> = eig.values.to_vec();
        sorted.sort_by(|a,b| a.im.partial_cmp(&b.im).unwrap().then(a.re.partial_cmp(&b.re).unwrap()));
        let mut mind = f64::INFINITY;
        for w in sorted.windows(2) { mind = mind.min((w[1]-w[0]).norm()); }
        println!("  min lambda spacing: {mind:.3e}");
        diag = eig.values.clone();
        for jj in (j+1)..3 {
            // no basis transform here; just checking eigenvalue structure per stage
            let _ = &ucur[jj];
        }
        break; // stage 0 only for now
    }
}
