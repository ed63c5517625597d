from harmctl.main import cli

cli(prog_name="harmctl")
