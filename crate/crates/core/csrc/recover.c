/*
 * Thread-local fault recovery points.
 *
 * rpcool_catch() runs `body(ctx)` with a recovery point armed. If the SIGSEGV
 * handler decides the fault belongs to the armed region it calls
 * rpcool_unwind(), which jumps back here and makes rpcool_catch() return 1.
 * The handler is installed with SA_NODEFER, so the signal mask does not need
 * saving: nothing is left blocked after the jump and no syscall is made.
 */
#include <setjmp.h>
#include <stddef.h>

static __thread sigjmp_buf *rpcool_armed = NULL;

int rpcool_catch(void (*body)(void *), void *ctx) {
    sigjmp_buf buf;
    sigjmp_buf *prev = rpcool_armed;
    if (sigsetjmp(buf, 0) == 0) {
        rpcool_armed = &buf;
        body(ctx);
        rpcool_armed = prev;
        return 0;
    }
    rpcool_armed = prev;
    return 1;
}

int rpcool_is_armed(void) { return rpcool_armed != NULL; }

void rpcool_unwind(void) {
    sigjmp_buf *buf = rpcool_armed;
    if (buf != NULL) {
        siglongjmp(*buf, 1);
    }
}
