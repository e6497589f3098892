/* C API for the advreg library.
 *
 * Conventions:
 *  - Fallible functions return an int status code (ADVREG_OK on success) and
 *    write results through out-pointers.
 *  - Handles are opaque; free them with the matching _free function. Freeing
 *    NULL is a no-op.
 *  - On failure, advreg_last_error() returns a thread-local message valid
 *    until the next failing call on the same thread.
 */

#ifndef ADVREG_H
#define ADVREG_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define ADVREG_OK 0
#define ADVREG_ERR_NULL_POINTER 1
#define ADVREG_ERR_INVALID_ARGUMENT 2
#define ADVREG_ERR_DATA 3
#define ADVREG_ERR_SOLVER 4
#define ADVREG_ERR_PANIC 5

typedef struct AdvregDataset AdvregDataset;
typedef struct AdvregModel AdvregModel;

/* Message of the last error on this thread, or NULL if none. */
const char *advreg_last_error(void);

/* Library version string (static storage). */
const char *advreg_version(void);

/* Loads a CSV with a header row; label_column names the label column. */
int advreg_dataset_load(const char *path,
                        const char *label_column,
                        AdvregDataset **out);

/* Builds a dataset from a row-major n_rows x n_features array and a label
 * vector of length n_rows. */
int advreg_dataset_from_arrays(const double *rows,
                               size_t n_rows,
                               size_t n_features,
                               const double *labels,
                               AdvregDataset **out);

void advreg_dataset_free(AdvregDataset *dataset);

size_t advreg_dataset_rows(const AdvregDataset *dataset);
size_t advreg_dataset_features(const AdvregDataset *dataset);

/* Fits plain ridge regression; ridge <= 0 disables the ridge term. */
int advreg_fit_linreg(const AdvregDataset *dataset,
                      double ridge,
                      AdvregModel **out);

/* Trains the bilevel model: m seeded rows become the adversary block with
 * targets shifted by nu, delta is the cosine-similarity floor, ridge <= 0
 * disables the ridge term. Check advreg_model_status afterwards. */
int advreg_fit_bilevel(const AdvregDataset *train,
                       size_t m,
                       double delta,
                       double nu,
                       double ridge,
                       uint64_t seed,
                       AdvregModel **out);

void advreg_model_free(AdvregModel *model);

/* Solve status: 0 converged, 1 stalled, 2 iteration limit, -1 null handle. */
int advreg_model_status(const AdvregModel *model);

/* Final residual norm of the stationarity system (0 for baselines). */
double advreg_model_residual_norm(const AdvregModel *model);

size_t advreg_model_n_weights(const AdvregModel *model);

/* Copies the weight vector into out (len >= advreg_model_n_weights). */
int advreg_model_weights(const AdvregModel *model, double *out, size_t len);

/* Prediction for one feature row of length n_features. */
int advreg_predict(const AdvregModel *model,
                   const double *x,
                   size_t n_features,
                   double *out);

/* Mean squared error of the model over a dataset. */
int advreg_mse(const AdvregModel *model,
               const AdvregDataset *dataset,
               double *out);

/* Moves x0 (length q) to push the prediction toward target while keeping
 * cosine similarity with x0 at least delta; writes the result into out. */
int advreg_attack_instance(const AdvregModel *model,
                           const double *x0,
                           size_t q,
                           double target,
                           double delta,
                           double *out);

#ifdef __cplusplus
}
#endif

#endif /* ADVREG_H */
