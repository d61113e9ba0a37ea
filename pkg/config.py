import os
from dotenv import load_dotenv

load_dotenv()


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(f'REGSTOP_{name}', default))


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(f'REGSTOP_{name}', default))


class Config:
    # Tool info
    TOOL_NAME = "Regime Stop"
    VERSION = os.getenv('REGSTOP_VERSION', '1.0.0')

    # Solver settings
    TOL_SOLVE = _env_float('TOL_SOLVE', 1e-10)
    TOL_STOP = _env_float('TOL_STOP', 10 * TOL_SOLVE)
    TOL_FP = _env_float('TOL_FP', 1e-8)
    MAX_OUTER = _env_int('MAX_OUTER', 200)
    DAMPING_PATIENCE = _env_int('DAMPING_PATIENCE', 5)
    DAMPING = _env_float('DAMPING', 0.5)
    POLISH_ITERATIONS = _env_int('POLISH_ITERATIONS', 30)
    SOR_OMEGA = os.getenv('REGSTOP_SOR_OMEGA', 'auto')
    GRID_N = _env_int('GRID_N', 200)
    UPSILON_TAIL = _env_float('UPSILON_TAIL', 1e-6)
    AGE_FLOOR = 1e-12

    # Chain sampling
    HAZARD_TOL = _env_float('HAZARD_TOL', 1e-12)
    HOLDING_RTOL = _env_float('HOLDING_RTOL', 1e-10)
    HOLDING_CAP_FACTOR = _env_float('HOLDING_CAP_FACTOR', 10.0)

    # Monte Carlo settings
    MC_DT = _env_float('MC_DT', 1e-3)
    MC_HORIZON = os.getenv('REGSTOP_MC_HORIZON')  # None -> derived from the discount floor
    CENSOR_TAIL = _env_float('CENSOR_TAIL', 1e-8)
    CENSOR_WARN = _env_float('CENSOR_WARN', 0.01)
    MC_PATHS = _env_int('MC_PATHS', 10000)
    MC_SEED = _env_int('MC_SEED', 12345)
    MC_CHUNK = _env_int('MC_CHUNK', 4096)
    THREADS = os.getenv('REGSTOP_THREADS', 'auto')

    # Verification
    STAT_SIGMAS = _env_float('STAT_SIGMAS', 3.0)
    PERTURBATION = _env_float('PERTURBATION', 0.10)
    TRUNCATION_TOL = _env_float('TRUNCATION_TOL', 1e-4)

    # Output
    OUTPUT_DIR = os.getenv('REGSTOP_OUTPUT_DIR', 'out')
    LOG_FILE = os.getenv('REGSTOP_LOG_FILE', 'regime_stop.log')
    LOG_LEVEL = os.getenv('REGSTOP_LOG_LEVEL', 'INFO')
    CORPUS_DIR = os.getenv('REGSTOP_CORPUS_DIR', os.path.join(os.path.dirname(os.path.abspath(__file__)), 'corpus'))
