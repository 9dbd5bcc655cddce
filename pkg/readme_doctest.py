"""Run the shell examples in README.rst and compare their output.

Lines starting with ``    $`` are commands.  The indented lines after a command, up to the
end of its code block, are the expected output.  Leading ``NAME=value`` words set environment
variables for that command only.
"""
import os
import shlex
import subprocess
import sys


def g():
    command = None
    expected_output = []
    with open('README.rst') as fin:
        for line in fin:
            if line.startswith('    $'):
                if command:
                    yield command, '\n'.join(expected_output)

                command = line.replace('    $', '')
                expected_output = []
            elif line.startswith('    ') and command:
                expected_output.append(line.strip())
            elif line.strip() and command:
                yield command, '\n'.join(expected_output)
                command = None

        if command:
            yield command, '\n'.join(expected_output)


def split_env(command):
    argv = shlex.split(command)
    env = dict(os.environ)
    while argv and '=' in argv[0] and not argv[0].startswith('-'):
        name, value = argv.pop(0).split('=', 1)
        env[name] = value
    return argv, env


returncode = 0
for (command, expected_output) in g():
    print(command.strip())

    argv, env = split_env(command)
    stdout = subprocess.check_output(argv, env=env)
    stdout = stdout.strip().decode('utf-8').replace('\r\n', '\n')
    expected_output = expected_output.strip().replace('\r\n', '\n')

    if stdout == expected_output:
        print('OK')
    else:
        returncode += 1
        print('NG')
        print('>>>>')
        print(expected_output)
        print('====')
        print(stdout)
        print('<<<<')
        print()

sys.exit(returncode)
