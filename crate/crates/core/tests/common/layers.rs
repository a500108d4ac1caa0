//! Per-layer objective rebuilt from the eager loss functions.

use comfe_core::decoder::decoder_forward;
use comfe_core::losses::{carl_loss, cluster_loss, contrast_loss, discrim_loss, p_discrim_loss};
use comfe_core::train::TrainState;
use comfe_core::vmf::{image_label_scores, patch_class_posterior, patch_to_prototype_posterior, prototype_to_class_posterior};

use super::unit_rows;

/// Recomputes one image's objective layer by layer with the eager loss
/// functions and averages the results.
pub fn independent_layer_average(state: &TrainState, a: &comfe_core::Tensor, b: Option<&comfe_core::Tensor>, label: usize) -> f64 {
    let model = &state.model;
    let cfg = &model.config;
    let y = model.bank.label(label).unwrap();
    let c_hat = unit_rows(&model.bank.prototypes);
    let phi = model.bank.phi_as();
    let views: Vec<_> = std::iter::once(a).chain(b).map(unit_rows).collect();
    let per_view: Vec<Vec<comfe_core::Tensor>> = views
        .iter()
        .map(|z| decoder_forward(z, &model.queries.q, &model.decoder, &cfg.decoder()).unwrap())
        .collect();
    let layers = per_view[0].len();
    let mut sum = 0.0;
    for l in 0..layers {
        let mut layer = 0.0;
        let mut posts = Vec::new();
        for (z, protos) in views.iter().zip(&per_view) {
            let p_hat = unit_rows(&protos[l]);
            let zc = patch_class_posterior(z, &p_hat, &c_hat, &phi, cfg.tau1, cfg.tau2).unwrap();
            let pc = prototype_to_class_posterior(&p_hat, &c_hat, &phi, cfg.tau2).unwrap();
            let terms = cluster_loss(z, &p_hat, cfg.tau1).unwrap()
                + discrim_loss(&y, &image_label_scores(&zc).unwrap().scores).unwrap()
                + p_discrim_loss(&y, &image_label_scores(&pc).unwrap().scores).unwrap()
                + contrast_loss(&p_hat, &c_hat, cfg.tau_c).unwrap();
            layer += terms as f64 / views.len() as f64;
            posts.push(patch_to_prototype_posterior(z, &p_hat, cfg.tau1).unwrap());
        }
        if posts.len() == 2 {
            layer += carl_loss(posts[0].tensor(), posts[1].tensor(), cfg.carl).unwrap() as f64;
        }
        sum += layer;
    }
    sum / layers as f64
}
