from threadpoolctl import threadpool_limits

# one BLAS thread keeps every numeric result reproducible
threadpool_limits(1)

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
