use crate::engine::{Graph, ParamId, ParamStore, Var};

/// Central finite-difference check (h = 1e-5) of every entry of every stored
/// parameter. Returns the worst relative error, denominators floored at 1e-8.
pub fn fd_check(store: &mut ParamStore, build: &dyn Fn(&mut Graph, &ParamStore) -> Var) -> f64 {
    let ids: Vec<ParamId> = store.ids().collect();
    store.zero_grads(&ids);
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    g.backward(loss, store).unwrap();
    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.scalar(l)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for id in ids {
        for i in 0..store.get(id).numel() {
            let analytic = store.get(id).grad().unwrap()[i];
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
