#ifndef RDLM_H
#define RDLM_H

#include <stdbool.h>
#include <stdint.h>

// Lock modes as passed across the ABI.
#define RDLM_MODE_SHARED 0

#define RDLM_MODE_EXCLUSIVE 1

// Design selectors for [`rdlm_check_trace_file`]; `RDLM_DESIGN_NONE` skips
// the FIFO check.
#define RDLM_DESIGN_NONE -1

#define RDLM_DESIGN_SERVER_TCP 0

#define RDLM_DESIGN_SERVER_SR 1

#define RDLM_DESIGN_CLIENT_CENTRIC 2

typedef enum RdlmStatus {
  RDLM_STATUS_OK = 0,
  RDLM_STATUS_NULL_POINTER = 1,
  RDLM_STATUS_INVALID_ARGUMENT = 2,
  RDLM_STATUS_TIMEOUT = 3,
  RDLM_STATUS_ALREADY_HELD = 4,
  RDLM_STATUS_NOT_HELD = 5,
  RDLM_STATUS_IO = 6,
  RDLM_STATUS_TRANSPORT = 7,
  RDLM_STATUS_VIOLATIONS = 8,
} RdlmStatus;

// A node hosting one lock table.
typedef struct RdlmHost RdlmHost;

// A client-centric lock session.
typedef struct RdlmSession RdlmSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or NULL. The pointer
// stays valid until the next failing call on the same thread.
const char *rdlm_last_error(void);

uint64_t rdlm_lock_word_encode(uint32_t owner, uint32_t shared_count);

// # Safety
// `owner` and `shared_count` must be valid for writes.
enum RdlmStatus rdlm_lock_word_decode(uint64_t word, uint32_t *owner, uint32_t *shared_count);

// # Safety
// `out` must be valid for writes.
enum RdlmStatus rdlm_contention_rate(uint32_t n_items, uint32_t n_clients, double *out);

// # Safety
// `out` must be valid for writes.
enum RdlmStatus rdlm_upper_bound_throughput(double cores,
                                            double frequency_hz,
                                            double cycles_per_message,
                                            double messages_per_lock,
                                            double *out);

// Creates a node hosting a lock table of `n_items` words.
//
// # Safety
// `out` must be valid for writes.
enum RdlmStatus rdlm_host_new(uint32_t n_items, struct RdlmHost **out);

// # Safety
// `host` must come from [`rdlm_host_new`] and not be used afterwards.
// Sessions connected to it must be freed first.
void rdlm_host_free(struct RdlmHost *host);

// Starts accepting TCP-emulated connections on `addr` (e.g.
// `"127.0.0.1:0"`) and writes the bound port to `port`.
//
// # Safety
// `host` must be a live host, `addr` a NUL-terminated string and `port`
// valid for writes.
enum RdlmStatus rdlm_host_listen(struct RdlmHost *host, const char *addr, uint16_t *port);

// Reads one lock word from the host's table.
//
// # Safety
// `host` must be a live host; `owner` and `shared_count` valid for writes.
enum RdlmStatus rdlm_host_lock_word(const struct RdlmHost *host,
                                    uint32_t item,
                                    uint32_t *owner,
                                    uint32_t *shared_count);

// Opens an in-process session on `host`. A negative `max_retries` retries
// forever.
//
// # Safety
// `host` must be a live host and `out` valid for writes.
enum RdlmStatus rdlm_session_connect_local(const struct RdlmHost *host,
                                           uint64_t backoff_ns,
                                           int64_t max_retries,
                                           struct RdlmSession **out);

// Opens a session to a listening host at `addr` whose table has `n_items`
// words.
//
// # Safety
// `addr` must be a NUL-terminated string and `out` valid for writes.
enum RdlmStatus rdlm_session_connect_tcp(const char *addr,
                                         uint32_t n_items,
                                         uint64_t backoff_ns,
                                         int64_t max_retries,
                                         struct RdlmSession **out);

// # Safety
// `session` must come from one of the connect functions and not be used
// afterwards.
void rdlm_session_free(struct RdlmSession *session);

// Client id of the session, or 0 for NULL.
//
// # Safety
// `session` must be NULL or a live session.
uint32_t rdlm_session_client_id(const struct RdlmSession *session);

// Blocks until `item` is held in `mode` or the retry budget runs out.
//
// # Safety
// `session` must be a live session not used concurrently from another
// thread.
enum RdlmStatus rdlm_session_lock(struct RdlmSession *session, uint32_t item, uint32_t mode);

// # Safety
// As for [`rdlm_session_lock`].
enum RdlmStatus rdlm_session_unlock(struct RdlmSession *session, uint32_t item, uint32_t mode);

// Checks a trace file and writes the number of violations to
// `violations`. Returns `RDLM_STATUS_VIOLATIONS` when that number is
// non-zero.
//
// # Safety
// `path` must be a NUL-terminated string and `violations` valid for writes.
enum RdlmStatus rdlm_check_trace_file(const char *path, int32_t design, uint64_t *violations);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RDLM_H */
